//! End-to-end training and scoring shared by the CLI and the test suites.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::{Corpus, DiffRecord};
use crate::embed::{
    embed_records, reference_provider, render_model_input_with, train_mlp, Concurrency, EmbeddingProvider,
    MlpClassifier, MlpConfig, PoolMode,
};
use crate::error::{Error, Result};
use crate::eval::{resample, ResampleConfig, Split};
use crate::features::FeatureTable;
use crate::gating::Reason;
use crate::logreg::{self, LogisticModel, TrainConfig};
use crate::protocol::ExternalProvider;
use crate::riskalign::{
    annotate, risk_score_with, train_reference_aligned_model, AlignConfig, NextTokenDistributionProvider,
    ReferenceAlignedModel, ScoreMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logreg,
    Mlp,
    Riskalign,
    /// Logistic regression with a cross-fitted risk-alignment score feature.
    Ensemble,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Logreg, ModelKind::Mlp, ModelKind::Riskalign, ModelKind::Ensemble];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Logreg => "logreg",
            ModelKind::Mlp => "mlp",
            ModelKind::Riskalign => "riskalign",
            ModelKind::Ensemble => "ensemble",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EmbedderSpec {
    Reference { seed: u64, dim: usize },
    External { command: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AlignedSpec {
    Reference { model: ReferenceAlignedModel },
    External { command: Vec<String> },
}

/// Everything needed to score diffs with one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelFile {
    Logreg {
        model: LogisticModel,
    },
    Mlp {
        embedder: EmbedderSpec,
        pool: PoolMode,
        max_len: usize,
        classifier: MlpClassifier,
    },
    Riskalign {
        aligned: AlignedSpec,
        score_mode: ScoreMode,
        max_len: usize,
    },
    Ensemble {
        logreg: LogisticModel,
        aligned: AlignedSpec,
        score_mode: ScoreMode,
        max_len: usize,
    },
}

impl ModelFile {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelFile::Logreg { .. } => ModelKind::Logreg,
            ModelFile::Mlp { .. } => ModelKind::Mlp,
            ModelFile::Riskalign { .. } => ModelKind::Riskalign,
            ModelFile::Ensemble { .. } => ModelKind::Ensemble,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Model(format!("{}: {e}", path.display())))
    }
}

/// Records that carry file changes and can therefore be scored.
pub fn scorable(c: &Corpus) -> Vec<&DiffRecord> {
    c.records().iter().filter(|r| !r.changes.is_empty()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub positives: usize,
    pub negatives: usize,
}

impl ClassCounts {
    pub fn of(c: &Corpus) -> Self {
        let positives = c.sev_count();
        ClassCounts {
            positives,
            negatives: c.len() - positives,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TrainReport {
    pub before: ClassCounts,
    pub after: ClassCounts,
}

fn embedder_for(spec: &EmbedderSpec) -> Result<Box<dyn EmbeddingProvider>> {
    Ok(match spec {
        EmbedderSpec::Reference { seed, dim } => {
            let mut p = reference_provider(*seed);
            p.dim = *dim;
            Box::new(p)
        }
        EmbedderSpec::External { command } => Box::new(spawn(command)?),
    })
}

fn aligned_for(spec: &AlignedSpec) -> Result<Box<dyn NextTokenDistributionProvider>> {
    Ok(match spec {
        AlignedSpec::Reference { model } => Box::new(model.clone()),
        AlignedSpec::External { command } => Box::new(spawn(command)?),
    })
}

fn spawn(command: &[String]) -> Result<ExternalProvider> {
    let (program, args) = command
        .split_first()
        .ok_or_else(|| Error::InvalidConfig("provider command is empty".into()))?;
    ExternalProvider::spawn(program, args)
}

fn labels(records: &[&DiffRecord]) -> Vec<bool> {
    records.iter().map(|r| r.caused_sev).collect()
}

fn fit_aligned(records: &[&DiffRecord], cfg: &AlignConfig, max_len: usize) -> Result<ReferenceAlignedModel> {
    let dataset = records
        .iter()
        .map(|r| annotate(&render_model_input_with(r, max_len)?, Some(r.caused_sev)))
        .collect::<Result<Vec<_>>>()?;
    train_reference_aligned_model(&dataset, cfg)
}

fn aligned_scores(
    provider: &dyn NextTokenDistributionProvider,
    records: &[&DiffRecord],
    mode: ScoreMode,
    max_len: usize,
) -> Result<Vec<f64>> {
    let one = |r: &&DiffRecord| -> Result<f64> {
        let input = render_model_input_with(r, max_len)?;
        risk_score_with(provider, &input, mode).map(|(s, _)| s)
    };
    match provider.concurrency() {
        Concurrency::Concurrent => records.par_iter().map(one).collect(),
        Concurrency::Serial => records.iter().map(one).collect(),
    }
}

fn feature_rows(records: &[&DiffRecord], table: &FeatureTable) -> Result<Vec<crate::features::FeatureVector>> {
    records.iter().map(|r| table.require(&r.id).copied()).collect()
}

/// Resamples the training partition and fits one model family.
///
/// `table` must hold features for the whole corpus so training rows see
/// their full history.
pub fn train_model(kind: ModelKind, split: &Split, table: &FeatureTable, cfg: &Config) -> Result<(ModelFile, TrainReport)> {
    let trainable = split.train.filter(|r| !r.changes.is_empty());
    let resampled = resample(
        &trainable,
        &ResampleConfig {
            negatives_per_positive: cfg.resample.negatives_per_positive,
            seed: cfg.seeds.resample,
        },
    )?;
    let report = TrainReport {
        before: ClassCounts::of(&trainable),
        after: ClassCounts::of(&resampled),
    };
    let records = scorable(&resampled);
    let y = labels(&records);
    let max_len = cfg.embed.max_len;
    let file = match kind {
        ModelKind::Logreg => ModelFile::Logreg {
            model: logreg::train(
                &feature_rows(&records, table)?,
                &y,
                &TrainConfig {
                    seed: cfg.seeds.train,
                    ..cfg.logreg
                },
            )?,
        },
        ModelKind::Mlp => {
            let embedder = match &cfg.providers.embedding {
                Some(command) => EmbedderSpec::External { command: command.clone() },
                None => EmbedderSpec::Reference {
                    seed: cfg.seeds.embed,
                    dim: crate::embed::REFERENCE_DIM,
                },
            };
            let provider = embedder_for(&embedder)?;
            let e = embed_records(provider.as_ref(), &records, cfg.embed.pool, max_len)?;
            let classifier = train_mlp(
                &e,
                &y,
                &MlpConfig {
                    seed: cfg.seeds.train,
                    ..cfg.mlp
                },
            )?;
            ModelFile::Mlp {
                embedder,
                pool: cfg.embed.pool,
                max_len,
                classifier,
            }
        }
        ModelKind::Riskalign => ModelFile::Riskalign {
            aligned: aligned_spec(&records, cfg)?,
            score_mode: cfg.riskalign.score_mode,
            max_len,
        },
        ModelKind::Ensemble => {
            let mode = cfg.riskalign.score_mode;
            let align_cfg = AlignConfig {
                seed: cfg.seeds.train,
                ..cfg.riskalign.train
            };
            // Two-fold cross-fitting so no training row is scored by a
            // content model that saw its label.
            let mut llm = vec![0.0; records.len()];
            for fold in 0..2 {
                let fit_on: Vec<&DiffRecord> = records.iter().enumerate().filter(|(i, _)| i % 2 != fold).map(|(_, r)| *r).collect();
                let held: Vec<usize> = (0..records.len()).filter(|i| i % 2 == fold).collect();
                let held_records: Vec<&DiffRecord> = held.iter().map(|&i| records[i]).collect();
                let scores = match &cfg.providers.next_token {
                    Some(command) => aligned_scores(&spawn(command)?, &held_records, mode, max_len)?,
                    None => aligned_scores(&fit_aligned(&fit_on, &align_cfg, max_len)?, &held_records, mode, max_len)?,
                };
                for (i, s) in held.into_iter().zip(scores) {
                    llm[i] = s;
                }
            }
            let rows: Vec<_> = feature_rows(&records, table)?
                .into_iter()
                .zip(&llm)
                .map(|(x, s)| x.with_llm_score(Some(*s)))
                .collect();
            let logreg = logreg::train(
                &rows,
                &y,
                &TrainConfig {
                    seed: cfg.seeds.train,
                    ..cfg.logreg
                },
            )?;
            ModelFile::Ensemble {
                logreg,
                aligned: aligned_spec(&records, cfg)?,
                score_mode: mode,
                max_len,
            }
        }
    };
    Ok((file, report))
}

fn aligned_spec(records: &[&DiffRecord], cfg: &Config) -> Result<AlignedSpec> {
    Ok(match &cfg.providers.next_token {
        Some(command) => AlignedSpec::External { command: command.clone() },
        None => AlignedSpec::Reference {
            model: fit_aligned(
                records,
                &AlignConfig {
                    seed: cfg.seeds.train,
                    ..cfg.riskalign.train
                },
                cfg.embed.max_len,
            )?,
        },
    })
}

/// A model file with its providers instantiated.
pub struct LoadedModel {
    file: ModelFile,
    embedder: Option<Box<dyn EmbeddingProvider>>,
    aligned: Option<Box<dyn NextTokenDistributionProvider>>,
}

impl LoadedModel {
    pub fn new(file: ModelFile) -> Result<Self> {
        let (embedder, aligned) = match &file {
            ModelFile::Logreg { .. } => (None, None),
            ModelFile::Mlp { embedder, .. } => (Some(embedder_for(embedder)?), None),
            ModelFile::Riskalign { aligned, .. } | ModelFile::Ensemble { aligned, .. } => (None, Some(aligned_for(aligned)?)),
        };
        Ok(LoadedModel { file, embedder, aligned })
    }

    pub fn file(&self) -> &ModelFile {
        &self.file
    }

    pub fn kind(&self) -> ModelKind {
        self.file.kind()
    }

    /// Scores in the order of `records`; every record must have changes.
    pub fn score(&self, records: &[&DiffRecord], table: &FeatureTable) -> Result<Vec<f64>> {
        match &self.file {
            ModelFile::Logreg { model } => records
                .iter()
                .map(|r| model.score(table.require(&r.id)?))
                .collect(),
            ModelFile::Mlp {
                pool,
                max_len,
                classifier,
                ..
            } => {
                let provider = self.embedder.as_deref().expect("embedder loaded");
                embed_records(provider, records, *pool, *max_len)?
                    .iter()
                    .map(|e| crate::embed::mlp_score(classifier, e))
                    .collect()
            }
            ModelFile::Riskalign { score_mode, max_len, .. } => {
                aligned_scores(self.aligned.as_deref().expect("aligned loaded"), records, *score_mode, *max_len)
            }
            ModelFile::Ensemble {
                logreg,
                score_mode,
                max_len,
                ..
            } => {
                let llm = aligned_scores(self.aligned.as_deref().expect("aligned loaded"), records, *score_mode, *max_len)?;
                records
                    .iter()
                    .zip(llm)
                    .map(|(r, s)| logreg.ensemble_score(table.require(&r.id)?, Some(s)))
                    .collect()
            }
        }
    }

    /// Top-`k` reasons behind a score.
    pub fn reasons(&self, record: &DiffRecord, table: &FeatureTable, k: usize) -> Result<Vec<Reason>> {
        let model = match &self.file {
            ModelFile::Logreg { model } => model,
            ModelFile::Ensemble { logreg, .. } => logreg,
            _ => {
                return Ok(vec![Reason::Note {
                    text: format!("{} content model; no per-feature attribution", self.kind()),
                }])
            }
        };
        let mut x = *table.require(&record.id)?;
        if let (ModelFile::Ensemble { score_mode, max_len, .. }, Some(p)) = (&self.file, &self.aligned) {
            x = x.with_llm_score(Some(aligned_scores(p.as_ref(), &[record], *score_mode, *max_len)?[0]));
        }
        Ok(model
            .explain(&x, k)?
            .into_iter()
            .map(|c| Reason::Feature {
                feature: c.feature,
                contribution: c.value,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("svm".parse::<ModelKind>().is_err());
    }

    #[test]
    fn model_file_is_tagged() {
        let m = LogisticModel::from_parts(&["a"], &[1.0], 0.0).unwrap();
        let text = serde_json::to_string(&ModelFile::Logreg { model: m.clone() }).unwrap();
        assert!(text.starts_with("{\"kind\":\"logreg\""));
        let back: ModelFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ModelFile::Logreg { model: m });
    }
}
