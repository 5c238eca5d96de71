//! Risk alignment: `[DRS]`-annotated prompts, label-token scoring and a
//! small trainable next-token head standing in for a fine-tuned LLM.
//!
//! The label token `"1"` marks the SEV-causing class and `"0"` the safe one.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::embed::{render_model_input_with, tokens, Concurrency, ModelInput, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::eval::{resample, ResampleConfig};
use crate::math::fnv1a;

pub const OPEN_MARKER: &str = "[DRS]";
pub const CLOSE_MARKER: &str = "[/DRS]";
pub const SEV_TOKEN: &str = "1";
pub const SAFE_TOKEN: &str = "0";

/// Tolerance on the total probability a provider may report.
const MASS_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedExample {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl AnnotatedExample {
    /// Prompt followed by the label token, as seen during fine-tuning.
    pub fn training_text(&self) -> String {
        format!("{}{}", self.prompt, self.label.as_deref().unwrap_or(""))
    }

    pub fn label_bool(&self) -> Option<bool> {
        self.label.as_deref().map(|l| l == SEV_TOKEN)
    }
}

pub fn annotate(input: &ModelInput, label: Option<bool>) -> Result<AnnotatedExample> {
    for marker in [OPEN_MARKER, CLOSE_MARKER] {
        if input.text.contains(marker) {
            return Err(Error::MarkerCollision(marker));
        }
    }
    Ok(AnnotatedExample {
        prompt: format!("{OPEN_MARKER}{}{CLOSE_MARKER}", input.text),
        label: label.map(|l| if l { SEV_TOKEN } else { SAFE_TOKEN }.to_string()),
    })
}

/// Resamples the training corpus and annotates every record with its label.
pub fn build_sft_dataset(c: &Corpus, cfg: &ResampleConfig) -> Result<Vec<AnnotatedExample>> {
    build_sft_dataset_with(c, cfg, DEFAULT_MAX_LEN)
}

pub fn build_sft_dataset_with(c: &Corpus, cfg: &ResampleConfig, max_len: usize) -> Result<Vec<AnnotatedExample>> {
    if c.is_empty() {
        return Err(Error::EmptyInput("corpus is empty"));
    }
    let kept = resample(c, cfg)?;
    kept.records()
        .iter()
        .filter(|r| !r.changes.is_empty())
        .map(|r| annotate(&render_model_input_with(r, max_len)?, Some(r.caused_sev)))
        .collect()
}

pub trait NextTokenDistributionProvider: Send + Sync {
    /// Probabilities of the requested tokens as the next token after `prompt`.
    fn next_token_probs(&self, prompt: &str, tokens: &[&str]) -> Result<BTreeMap<String, f64>>;
    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDiagnostics {
    pub off_label_mass: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `p1 / (p0 + p1)`.
    #[default]
    Normalized,
    RawP1,
}

/// Score from label-token probabilities.
pub fn score_from_probs(p0: f64, p1: f64, mode: ScoreMode) -> Result<(f64, AlignmentDiagnostics)> {
    if !(p0.is_finite() && p1.is_finite()) || p0 < 0.0 || p1 < 0.0 || p0 + p1 > 1.0 + MASS_SLACK {
        return Err(Error::Provider(format!("invalid label probabilities p0={p0} p1={p1}")));
    }
    if p0 + p1 == 0.0 {
        return Err(Error::NotAligned);
    }
    let score = match mode {
        ScoreMode::Normalized => p1 / (p0 + p1),
        ScoreMode::RawP1 => p1,
    };
    let diag = AlignmentDiagnostics {
        off_label_mass: (1.0 - p0 - p1).clamp(0.0, 1.0),
    };
    Ok((score, diag))
}

pub fn risk_score(provider: &dyn NextTokenDistributionProvider, input: &ModelInput) -> Result<(f64, AlignmentDiagnostics)> {
    risk_score_with(provider, input, ScoreMode::Normalized)
}

pub fn risk_score_with(
    provider: &dyn NextTokenDistributionProvider,
    input: &ModelInput,
    mode: ScoreMode,
) -> Result<(f64, AlignmentDiagnostics)> {
    let prompt = annotate(input, None)?.prompt;
    let probs = provider.next_token_probs(&prompt, &[SAFE_TOKEN, SEV_TOKEN])?;
    let total: f64 = probs.values().sum();
    if probs.values().any(|p| !p.is_finite() || *p < 0.0) || total > 1.0 + MASS_SLACK {
        return Err(Error::Provider(format!("not a sub-distribution: {probs:?}")));
    }
    let p = |t: &str| probs.get(t).copied().unwrap_or(0.0);
    score_from_probs(p(SAFE_TOKEN), p(SEV_TOKEN), mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    /// Hash buckets for the bag of tokens; a power of two.
    pub buckets: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            buckets: 1 << 12,
            learning_rate: 0.05,
            epochs: 150,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Output classes of the reference head: "0", "1", then every other token.
const CLASSES: usize = 3;
const CLASS_SAFE: usize = 0;
const CLASS_SEV: usize = 1;

const MODEL_FORMAT: &str = "diffrisk-aligned";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignTrainMeta {
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub n_train: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
}

/// Softmax over {"0", "1", any other token} on hashed token-presence
/// features of the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAlignedModel {
    pub format: String,
    pub version: u32,
    pub buckets: usize,
    /// `CLASSES x buckets`, row-major.
    pub weights: Vec<f64>,
    pub bias: [f64; CLASSES],
    pub train_meta: AlignTrainMeta,
}

/// Maximal runs of letters and of digits, e.g. `a/orgA/core3.py` gives
/// `a`, `orgA`, `core`, `3`, `py`. Sub-word pieces let what is learnt about
/// `core3` carry over to `core7` in a path the model never saw.
fn pieces(token: &str) -> impl Iterator<Item = &str> {
    token
        .split(|c: char| !c.is_alphanumeric())
        .flat_map(|word| {
            let mut parts = Vec::new();
            let mut start = 0;
            let mut prev: Option<bool> = None;
            for (i, c) in word.char_indices() {
                let digit = c.is_numeric();
                if prev.is_some_and(|p| p != digit) {
                    parts.push(&word[start..i]);
                    start = i;
                }
                prev = Some(digit);
            }
            parts.push(&word[start..]);
            parts
        })
        .filter(|p| !p.is_empty())
}

/// Hashed whole tokens plus their sub-word pieces.
fn bucket_set(prompt: &str, buckets: usize) -> Vec<usize> {
    let mask = buckets as u64 - 1;
    let mut b: Vec<usize> = tokens(prompt)
        .flat_map(|t| std::iter::once(t).chain(pieces(t)))
        .map(|t| (fnv1a(t.as_bytes()) & mask) as usize)
        .collect();
    b.sort_unstable();
    b.dedup();
    b
}

fn softmax(z: [f64; CLASSES]) -> [f64; CLASSES] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

impl ReferenceAlignedModel {
    fn logits(&self, features: &[usize]) -> [f64; CLASSES] {
        let mut z = self.bias;
        for (c, zc) in z.iter_mut().enumerate() {
            let row = &self.weights[c * self.buckets..(c + 1) * self.buckets];
            *zc += features.iter().map(|&f| row[f]).sum::<f64>();
        }
        z
    }

    /// Probabilities of "0", "1" and everything else.
    pub fn class_probs(&self, prompt: &str) -> [f64; CLASSES] {
        softmax(self.logits(&bucket_set(prompt, self.buckets)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ReferenceAlignedModel = serde_json::from_str(&text)?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(Error::Model(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, got {} v{}",
                m.format, m.version
            )));
        }
        if !m.buckets.is_power_of_two() || m.weights.len() != CLASSES * m.buckets {
            return Err(Error::Model("weight matrix does not match bucket count".into()));
        }
        Ok(m)
    }
}

impl NextTokenDistributionProvider for ReferenceAlignedModel {
    fn next_token_probs(&self, prompt: &str, requested: &[&str]) -> Result<BTreeMap<String, f64>> {
        let p = self.class_probs(prompt);
        Ok(requested
            .iter()
            .map(|&t| {
                let v = match t {
                    SAFE_TOKEN => p[CLASS_SAFE],
                    SEV_TOKEN => p[CLASS_SEV],
                    // The "other" class spreads over the rest of the vocabulary;
                    // no single other token is credited with it.
                    _ => 0.0,
                };
                (t.to_string(), v)
            })
            .collect())
    }
}

/// Fits the reference head on labelled examples by full-batch gradient
/// descent with Adam-style step scaling. Deterministic.
pub fn train_reference_aligned_model(dataset: &[AnnotatedExample], cfg: &AlignConfig) -> Result<ReferenceAlignedModel> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("empty SFT dataset"));
    }
    if !cfg.buckets.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("buckets {} is not a power of two", cfg.buckets)));
    }
    let mut examples = Vec::with_capacity(dataset.len());
    for ex in dataset {
        let class = match ex.label.as_deref() {
            Some(SAFE_TOKEN) => CLASS_SAFE,
            Some(SEV_TOKEN) => CLASS_SEV,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "training example needs label \"0\" or \"1\", got {other:?}"
                )))
            }
        };
        examples.push((bucket_set(&ex.prompt, cfg.buckets), class));
    }

    let b = cfg.buckets;
    let mut model = ReferenceAlignedModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        buckets: b,
        weights: vec![0.0; CLASSES * b],
        bias: [0.0; CLASSES],
        train_meta: AlignTrainMeta {
            seed: cfg.seed,
            learning_rate: cfg.learning_rate,
            epochs: cfg.epochs,
            l2: cfg.l2,
            n_train: dataset.len(),
            final_loss: None,
        },
    };
    let n = examples.len() as f64;
    let n_params = CLASSES * b + CLASSES;
    let (mut m1, mut m2) = (vec![0.0; n_params], vec![0.0; n_params]);
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut loss = 0.0;
    for epoch in 1..=cfg.epochs + 1 {
        let mut grad = vec![0.0; n_params];
        loss = 0.0;
        for (features, class) in &examples {
            let p = softmax(model.logits(features));
            loss -= p[*class].max(f64::MIN_POSITIVE).ln();
            for c in 0..CLASSES {
                let d = p[c] - if c == *class { 1.0 } else { 0.0 };
                for &f in features {
                    grad[c * b + f] += d;
                }
                grad[CLASSES * b + c] += d;
            }
        }
        loss /= n;
        loss += 0.5 * cfg.l2 * model.weights.iter().map(|w| w * w).sum::<f64>();
        if epoch > cfg.epochs {
            break;
        }
        for (i, g) in grad.iter_mut().enumerate() {
            *g /= n;
            if i < CLASSES * b {
                *g += cfg.l2 * model.weights[i];
            }
        }
        let c1 = 1.0 - beta1.powi(epoch as i32);
        let c2 = 1.0 - beta2.powi(epoch as i32);
        for i in 0..n_params {
            m1[i] = beta1 * m1[i] + (1.0 - beta1) * grad[i];
            m2[i] = beta2 * m2[i] + (1.0 - beta2) * grad[i] * grad[i];
            let step = cfg.learning_rate * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
            if i < CLASSES * b {
                model.weights[i] -= step;
            } else {
                model.bias[i - CLASSES * b] -= step;
            }
        }
    }
    model.train_meta.final_loss = Some(loss);
    Ok(model)
}
