//! Content-model path: diff text to hidden states to a pooled embedding to
//! an MLP classifier.

pub mod mlp;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::DiffRecord;
use crate::error::{Error, Result};
use crate::math::{fnv1a, splitmix64, unit_open};
use crate::unidiff::render_unidiff;

pub use mlp::{mlp_score, train_mlp, MlpClassifier, MlpConfig};

pub const DEFAULT_MAX_LEN: usize = 8192;
pub const TITLE_HEADER: &str = "### TITLE";
pub const TEST_PLAN_HEADER: &str = "### TEST PLAN";
pub const CHANGES_HEADER: &str = "### CHANGES";

/// Text fed to a content model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInput {
    pub text: String,
    #[serde(default)]
    pub truncated: bool,
}

impl ModelInput {
    pub fn new(text: impl Into<String>) -> Self {
        ModelInput {
            text: text.into(),
            truncated: false,
        }
    }
}

/// Whitespace tokens; the unit in which input length is measured.
pub fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

pub fn render_model_input(d: &DiffRecord) -> Result<ModelInput> {
    render_model_input_with(d, DEFAULT_MAX_LEN)
}

/// Title, test plan and unified diff under fixed section headers. Diff lines
/// are dropped from the end until the text fits in `max_len` tokens; the
/// title and test plan are never cut.
pub fn render_model_input_with(d: &DiffRecord, max_len: usize) -> Result<ModelInput> {
    if d.changes.is_empty() {
        return Err(Error::NoFileChanges(d.id.clone()));
    }
    let mut text = format!(
        "{TITLE_HEADER}\n{}\n{TEST_PLAN_HEADER}\n{}\n{CHANGES_HEADER}\n",
        d.title, d.test_plan
    );
    let mut used = tokens(&text).count();
    let diff = render_unidiff(&d.changes)?;
    let mut truncated = false;
    for line in diff.lines() {
        let n = tokens(line).count();
        if used + n > max_len {
            truncated = true;
            break;
        }
        used += n;
        text.push_str(line);
        text.push('\n');
    }
    Ok(ModelInput { text, truncated })
}

/// Final-layer hidden states, one row per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct HiddenStates {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl HiddenStates {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput("hidden states need at least one row and column"));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: i / cols,
                feature: format!("hidden[{}]", i % cols),
            });
        }
        Ok(HiddenStates { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                expected: cols,
                actual: bad.len(),
            });
        }
        let n = rows.len();
        HiddenStates::new(n, cols, rows.into_iter().flatten().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

impl TryFrom<Vec<Vec<f64>>> for HiddenStates {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        HiddenStates::from_rows(rows)
    }
}

impl From<HiddenStates> for Vec<Vec<f64>> {
    fn from(h: HiddenStates) -> Self {
        h.data.chunks(h.cols).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Maxpool,
    Meanpool,
}

/// Column-wise max or mean over the token rows.
pub fn aggregate(h: &HiddenStates, mode: PoolMode) -> Result<Vec<f64>> {
    if h.rows == 0 || h.cols == 0 {
        return Err(Error::EmptyInput("cannot pool an empty matrix"));
    }
    let mut out = h.row(0).to_vec();
    for i in 1..h.rows {
        for (o, v) in out.iter_mut().zip(h.row(i)) {
            match mode {
                PoolMode::Maxpool => *o = o.max(*v),
                PoolMode::Meanpool => *o += v,
            }
        }
    }
    if mode == PoolMode::Meanpool {
        for o in &mut out {
            *o /= h.rows as f64;
        }
    }
    Ok(out)
}

/// Whether a provider may be called from several threads at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concurrency {
    Concurrent,
    Serial,
}

pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, input: &ModelInput) -> Result<HiddenStates>;
    fn dim(&self) -> Result<usize>;
    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }
}

/// Deterministic token-hashing embedder: every token maps to a fixed
/// pseudo-Gaussian vector derived from its bytes and the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceProvider {
    pub seed: u64,
    pub dim: usize,
}

pub const REFERENCE_DIM: usize = 64;

pub fn reference_provider(seed: u64) -> ReferenceProvider {
    ReferenceProvider {
        seed,
        dim: REFERENCE_DIM,
    }
}

impl ReferenceProvider {
    /// Appends the token's vector to `out`.
    pub fn token_vector(&self, token: &str, out: &mut Vec<f64>) {
        let (_, mix) = splitmix64(self.seed);
        let mut state = fnv1a(token.as_bytes()) ^ mix;
        let end = out.len() + self.dim;
        while out.len() < end {
            let (s, a) = splitmix64(state);
            let (s, b) = splitmix64(s);
            state = s;
            let r = (-2.0 * unit_open(a).ln()).sqrt();
            let theta = std::f64::consts::TAU * unit_open(b);
            out.push(r * theta.cos());
            if out.len() < end {
                out.push(r * theta.sin());
            }
        }
    }
}

impl EmbeddingProvider for ReferenceProvider {
    fn embed(&self, input: &ModelInput) -> Result<HiddenStates> {
        let mut data = Vec::new();
        let mut rows = 0;
        for tok in tokens(&input.text) {
            self.token_vector(tok, &mut data);
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::EmptyInput("model input has no tokens"));
        }
        HiddenStates::new(rows, self.dim, data)
    }

    fn dim(&self) -> Result<usize> {
        Ok(self.dim)
    }
}

/// Pooled embeddings for `records`, in order. Serial providers are called
/// from one thread.
pub fn embed_records(
    provider: &dyn EmbeddingProvider,
    records: &[&DiffRecord],
    mode: PoolMode,
    max_len: usize,
) -> Result<Vec<Vec<f64>>> {
    let dim = provider.dim()?;
    let one = |d: &&DiffRecord| -> Result<Vec<f64>> {
        let input = render_model_input_with(d, max_len)?;
        let h = provider.embed(&input)?;
        if h.cols() != dim {
            return Err(Error::Provider(format!(
                "provider declared dim {dim} but returned {} columns",
                h.cols()
            )));
        }
        aggregate(&h, mode)
    };
    match provider.concurrency() {
        Concurrency::Concurrent => records.par_iter().map(one).collect(),
        Concurrency::Serial => records.iter().map(one).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FileChange;

    fn diff(title: &str, plan: &str, lines: usize) -> DiffRecord {
        let mut c = FileChange::new("a/b.py");
        c.added = (0..lines).map(|i| format!("x{i} = {i}")).collect();
        DiffRecord {
            id: "D".into(),
            title: title.into(),
            test_plan: plan.into(),
            author_id: "u".into(),
            closed_at: 1,
            org: "o".into(),
            changes: vec![c],
            caused_sev: false,
            metadata_only: false,
        }
    }

    #[test]
    fn sections_in_order() {
        let m = render_model_input(&diff("Fix it", "", 2)).unwrap();
        let t = m.text.find(TITLE_HEADER).unwrap();
        let p = m.text.find(TEST_PLAN_HEADER).unwrap();
        let c = m.text.find(CHANGES_HEADER).unwrap();
        assert!(t < p && p < c);
        assert!(m.text.contains("### TEST PLAN\n\n### CHANGES"));
        assert!(!m.truncated);
        assert_eq!(m, render_model_input(&diff("Fix it", "", 2)).unwrap());
    }

    #[test]
    fn truncation_keeps_title_and_plan() {
        let d = diff("Big change", "run the suite", 5000);
        let m = render_model_input_with(&d, 200).unwrap();
        assert!(m.truncated);
        assert!(tokens(&m.text).count() <= 200);
        assert!(m.text.starts_with("### TITLE\nBig change\n### TEST PLAN\nrun the suite\n### CHANGES\n"));
        assert!(m.text.contains("x0 = 0"));
        assert!(!m.text.contains("x4999"));
    }

    #[test]
    fn metadata_only_has_no_input() {
        let mut d = diff("t", "", 1);
        d.changes.clear();
        assert!(render_model_input(&d).is_err());
    }

    #[test]
    fn pooling_examples() {
        let h = HiddenStates::from_rows(vec![vec![1.0, 4.0], vec![3.0, 2.0]]).unwrap();
        assert_eq!(aggregate(&h, PoolMode::Maxpool).unwrap(), vec![3.0, 4.0]);
        assert_eq!(aggregate(&h, PoolMode::Meanpool).unwrap(), vec![2.0, 3.0]);
        let one = HiddenStates::from_rows(vec![vec![-1.0, 0.5]]).unwrap();
        assert_eq!(aggregate(&one, PoolMode::Meanpool).unwrap(), vec![-1.0, 0.5]);
        assert!(HiddenStates::from_rows(vec![]).is_err());
        assert!(HiddenStates::from_rows(vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn reference_rows_depend_only_on_token() {
        let p = reference_provider(3);
        let a = p.embed(&ModelInput::new("alpha beta gamma")).unwrap();
        let b = p.embed(&ModelInput::new("alpha delta gamma")).unwrap();
        assert_eq!(a.cols(), REFERENCE_DIM);
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(1), b.row(1));
        assert_eq!(a.row(2), b.row(2));
        assert_eq!(a, p.embed(&ModelInput::new("alpha beta gamma")).unwrap());
        let other_seed = reference_provider(4).embed(&ModelInput::new("alpha")).unwrap();
        assert_ne!(other_seed.row(0), a.row(0));
    }

    #[test]
    fn hidden_states_json_is_row_major() {
        let h = HiddenStates::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let text = serde_json::to_string(&h).unwrap();
        assert_eq!(text, "[[1.0,2.0],[3.0,4.0]]");
        assert_eq!(serde_json::from_str::<HiddenStates>(&text).unwrap(), h);
    }
}
