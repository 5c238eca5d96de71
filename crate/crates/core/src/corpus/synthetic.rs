//! Seeded synthetic corpus with planted risk signal.
//!
//! Each diff's true SEV probability follows a logistic model over latent
//! per-diff quantities: churn ratio, number of files, author experience, a
//! "fragile service" flag, and a hidden content-risk factor. The first three
//! are computed exactly as the feature extractor computes them; fragile
//! services live under a recognisable directory stem (see
//! [`SyntheticConfig::critical_prefix`]) and accumulate prior-SEV history;
//! the content factor only surfaces as risky tokens sprinkled into titles,
//! test plans and code.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Geometric, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Corpus, DiffRecord, FileChange, Provenance, DEFAULT_LANGUAGES};
use crate::error::{Error, Result};
use crate::math::{logit, mean_std, sigmoid};

/// Tokens whose presence correlates with the hidden content-risk factor.
pub const RISKY_TOKENS: [&str; 8] = [
    "unchecked_cast",
    "global_mutex",
    "retry_storm",
    "schema_migration",
    "cache_flush_all",
    "flag_flip",
    "raw_pointer",
    "config_push",
];

const IDENTS: [&str; 24] = [
    "alpha", "beta", "gamma", "delta", "handler", "request", "buffer", "count", "index",
    "payload", "client", "result", "state", "value", "token", "cursor", "limit", "offset",
    "record", "entry", "session", "writer", "reader", "queue",
];
const VERBS: [&str; 8] = [
    "fix", "add", "refactor", "update", "remove", "rename", "cleanup", "support",
];
const BRANCH_KEYWORDS: [&str; 5] = ["if", "for", "while", "case", "catch"];

/// Directory stem of fragile services; their files carry the fragile risk
/// component.
pub const CRITICAL_SERVICE: &str = "core";
const FRAGILE_SERVICE_P: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n: usize,
    pub sev_rate: f64,
    pub signal_strength: f64,
    /// Multiplier on the weight of the text-borne content factor.
    #[serde(default = "one")]
    pub text_signal: f64,
    pub n_authors: usize,
    pub n_files: usize,
    pub start: i64,
    pub end: i64,
    /// Org name; also the top-level directory of every generated path.
    pub org: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 1,
            n: 1000,
            sev_rate: 0.01,
            signal_strength: 2.0,
            text_signal: 1.0,
            n_authors: 200,
            n_files: 2000,
            // 2022-01-01 .. 2023-10-02 UTC
            start: 1_640_995_200,
            end: 1_696_204_800,
            org: "orgA".into(),
        }
    }
}

fn one() -> f64 {
    1.0
}

impl SyntheticConfig {
    /// Path prefix shared by every fragile service of this corpus.
    pub fn critical_prefix(&self) -> String {
        format!("{}/{CRITICAL_SERVICE}", self.org)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic: {m}")));
        if self.n == 0 {
            return bad("n must be positive");
        }
        if !(self.sev_rate > 0.0 && self.sev_rate < 1.0) {
            return bad("sev_rate must lie in (0, 1)");
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return bad("signal_strength must be finite and non-negative");
        }
        if !(self.text_signal >= 0.0 && self.text_signal.is_finite()) {
            return bad("text_signal must be finite and non-negative");
        }
        if self.n_authors == 0 || self.n_files == 0 {
            return bad("n_authors and n_files must be positive");
        }
        if self.start <= 0 || self.end <= self.start {
            return bad("need 0 < start < end");
        }
        if ((self.end - self.start) as u128) < self.n as u128 {
            return bad("time span shorter than one second per diff");
        }
        if self.org.is_empty() || self.org.contains('/') {
            return bad("org must be a non-empty single path component");
        }
        Ok(())
    }
}

/// Latent-component weights before normalisation to unit variance:
/// churn, files, author experience (negated), fragile flag, content.
const WEIGHTS: [f64; 5] = [0.9, 0.6, 0.6, 0.8, 0.7];

struct FileSlot {
    path: String,
    fragile: bool,
    exists: bool,
    size: u64,
}

fn extension(language: &str) -> &'static str {
    match language {
        "python" => "py",
        "cpp" => "cpp",
        "java" => "java",
        "javascript" => "js",
        "hack" => "php",
        "kotlin" => "kt",
        "rust" => "rs",
        _ => "cfg",
    }
}

struct Gen {
    rng: ChaCha8Rng,
}

impl Gen {
    fn chance(&mut self, p: f64) -> bool {
        self.rng.random::<f64>() < p
    }

    fn ident(&mut self) -> String {
        let word = IDENTS[self.rng.random_range(0..IDENTS.len())];
        format!("{word}_{}", self.rng.random_range(0..16))
    }

    fn risky(&mut self) -> &'static str {
        RISKY_TOKENS[self.rng.random_range(0..RISKY_TOKENS.len())]
    }

    fn code_line(&mut self, risky_p: f64) -> String {
        let mut line = if self.chance(0.15) {
            let kw = BRANCH_KEYWORDS[self.rng.random_range(0..BRANCH_KEYWORDS.len())];
            format!("{kw} ( {} ) {{", self.ident())
        } else {
            format!("{} = {} ( {} ) ;", self.ident(), self.ident(), self.ident())
        };
        if self.chance(risky_p) {
            line.push_str(" // ");
            line.push_str(self.risky());
        }
        line
    }

    fn lines(&mut self, count: u64, risky_p: f64) -> Vec<String> {
        (0..count).map(|_| self.code_line(risky_p)).collect()
    }
}

/// Generates a deterministic corpus from `cfg`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };

    let n_folders = (cfg.n_files / 10).max(1);
    let lang_weights = WeightedIndex::new([20, 18, 12, 14, 16, 8, 6, 6]).expect("static weights");
    let n_services = n_folders.div_ceil(8);
    let fragile_service: Vec<bool> = (0..n_services).map(|_| g.chance(FRAGILE_SERVICE_P)).collect();
    let mut files: Vec<FileSlot> = (0..cfg.n_files)
        .map(|i| {
            let folder = i % n_folders;
            let service = folder / 8;
            let fragile = fragile_service[service];
            let lang_idx = lang_weights.sample(&mut g.rng);
            let lang = DEFAULT_LANGUAGES.get(lang_idx).copied().unwrap_or("other");
            FileSlot {
                path: format!(
                    "{}/{}{}/mod{}/file{}.{}",
                    cfg.org,
                    if fragile { CRITICAL_SERVICE } else { "svc" },
                    service,
                    folder,
                    i,
                    extension(lang)
                ),
                fragile,
                exists: false,
                size: 0,
            }
        })
        .collect();
    let file_pick = WeightedIndex::new((0..cfg.n_files).map(|r| 1.0 / (r as f64 + 1.0).powf(0.7)))
        .expect("positive weights");
    let author_pick = WeightedIndex::new((0..cfg.n_authors).map(|r| 1.0 / (r as f64 + 1.0).powf(0.9)))
        .expect("positive weights");
    let extra_files = Geometric::new(0.55).expect("valid p");
    let new_len = LogNormal::<f64>::new(2.5, 0.8).expect("valid params");
    let edit_len = LogNormal::<f64>::new(1.6, 1.0).expect("valid params");

    let step = (cfg.end - cfg.start) / cfg.n as i64;
    let mut author_counts = vec![0u64; cfg.n_authors];
    let mut records = Vec::with_capacity(cfg.n);
    // churn, files, experience, fragile, content
    let mut components: Vec<[f64; 5]> = Vec::with_capacity(cfg.n);

    for i in 0..cfg.n {
        let closed_at = cfg.start + i as i64 * step + g.rng.random_range(0..step.max(1));
        let author = author_pick.sample(&mut g.rng);
        let content: f64 = g.rng.sample(StandardNormal);
        let line_risk = sigmoid(1.6 * content - 4.0);

        let n_touch = (1 + extra_files.sample(&mut g.rng)).min(12) as usize;
        let mut touched: Vec<usize> = Vec::with_capacity(n_touch);
        for _ in 0..n_touch * 8 {
            if touched.len() == n_touch {
                break;
            }
            let f = file_pick.sample(&mut g.rng);
            if !touched.contains(&f) {
                touched.push(f);
            }
        }

        let mut changes = Vec::with_capacity(touched.len());
        let mut fragile = false;
        for &f in &touched {
            let mut change = FileChange::new(files[f].path.clone());
            fragile |= files[f].fragile;
            if files[f].exists {
                let deleted = (edit_len.sample(&mut g.rng).round() as u64).min(files[f].size);
                let added = edit_len.sample(&mut g.rng).round() as u64;
                let added = if added + deleted == 0 { 1 } else { added };
                change.deleted = g.lines(deleted, 0.0);
                change.added = g.lines(added, line_risk);
                files[f].size = files[f].size - deleted + added;
            } else {
                let added = 1 + new_len.sample(&mut g.rng).round() as u64;
                change.added = g.lines(added, line_risk);
                change.is_new_file = true;
                files[f].exists = true;
                files[f].size = added;
            }
            change.file_size_after = files[f].size;
            changes.push(change);
        }

        let added: usize = changes.iter().map(|c| c.added.len()).sum();
        let deleted: usize = changes.iter().map(|c| c.deleted.len()).sum();
        let size: u64 = changes.iter().map(|c| c.file_size_after).sum();
        components.push([
            ((added + deleted + 1) as f64 / (size + 1) as f64).ln(),
            (1.0 + changes.len() as f64).ln(),
            (1.0 + author_counts[author] as f64).ln(),
            f64::from(u8::from(fragile)),
            content,
        ]);
        author_counts[author] += 1;

        let module = files[touched[0]]
            .path
            .rsplit('/')
            .nth(1)
            .unwrap_or("root")
            .to_string();
        let mut title = format!(
            "{} {} in {}",
            VERBS[g.rng.random_range(0..VERBS.len())],
            g.ident(),
            module
        );
        if g.chance(sigmoid(1.6 * content - 1.5)) {
            title.push(' ');
            title.push_str(g.risky());
        }
        let test_plan = if g.chance(sigmoid(1.5 * content - 2.0)) {
            String::new()
        } else {
            format!("run unit tests for {module}")
        };

        records.push(DiffRecord {
            id: format!("{}-{:06}", cfg.org, i),
            title,
            test_plan,
            author_id: format!("{}-author{}", cfg.org, author),
            closed_at,
            org: cfg.org.clone(),
            changes,
            caused_sev: false,
            metadata_only: false,
        });
    }

    let latent = combine_components(&components, cfg.text_signal);
    let risks: Vec<f64> = if cfg.signal_strength == 0.0 {
        vec![cfg.sev_rate; cfg.n]
    } else {
        let offset = calibrate_offset(&latent, cfg.signal_strength, cfg.sev_rate);
        latent
            .iter()
            .map(|&z| sigmoid(offset + cfg.signal_strength * z))
            .collect()
    };

    let mut truth = BTreeMap::new();
    for (record, &risk) in records.iter_mut().zip(&risks) {
        record.caused_sev = g.rng.random::<f64>() < risk;
        truth.insert(record.id.clone(), risk);
    }
    Corpus::new(records, Provenance::Synthetic, Some(truth))
}

/// Standardises each component, applies [`WEIGHTS`] (content scaled by
/// `text_signal`) and rescales the sum to unit variance so `signal_strength`
/// is the standard deviation of the logit.
fn combine_components(components: &[[f64; 5]], text_signal: f64) -> Vec<f64> {
    let stats: Vec<(f64, f64)> = (0..5)
        .map(|k| mean_std(components.iter().map(move |c| c[k])))
        .collect();
    let z = |c: &[f64; 5], k: usize| {
        let (m, s) = stats[k];
        if s > 0.0 {
            (c[k] - m) / s
        } else {
            0.0
        }
    };
    let raw: Vec<f64> = components
        .iter()
        .map(|c| {
            WEIGHTS[0] * z(c, 0) + WEIGHTS[1] * z(c, 1) - WEIGHTS[2] * z(c, 2)
                + WEIGHTS[3] * z(c, 3)
                + text_signal * WEIGHTS[4] * z(c, 4)
        })
        .collect();
    let (mean, sd) = mean_std(raw.iter().copied());
    raw.iter()
        .map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 })
        .collect()
}

/// Intercept making the mean true risk equal `target`.
fn calibrate_offset(latent: &[f64], strength: f64, target: f64) -> f64 {
    let mean_risk = |b: f64| latent.iter().map(|&z| sigmoid(b + strength * z)).sum::<f64>() / latent.len() as f64;
    let center = logit(target);
    let (mut lo, mut hi) = (center - 50.0, center + 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_risk(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
