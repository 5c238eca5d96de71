//! Logistic regression trained from scratch by full-batch gradient descent.
//!
//! Features are standardised internally (means and scales are stored in the
//! model) so per-feature contributions `w_i * x̃_i` are comparable and can be
//! surfaced as reasons. The optional `llm_score` feature supports ensembling
//! a content model's score; when it is absent at inference time the training
//! mean is substituted.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureVector, BASE_FEATURES, FEATURE_ORDER_VERSION, LLM_SCORE};
use crate::math::{bce_with_logit, logit, mean_std, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2: 1e-2,
            learning_rate: 0.1,
            epochs: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub l2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_score_mean: Option<f64>,
    pub n_train: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub scale: f64,
}

impl Standardizer {
    fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale
    }
}

/// A trained model. Weights, means and scales are aligned to `feature_order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct LogisticModel {
    feature_order: Vec<String>,
    weights: Vec<f64>,
    standardization: Vec<Standardizer>,
    intercept: f64,
    train_meta: TrainMeta,
}

const MODEL_FORMAT: &str = "diffrisk-logreg";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    feature_order_version: u32,
    feature_order: Vec<String>,
    weights: BTreeMap<String, f64>,
    standardization: BTreeMap<String, Standardizer>,
    intercept: f64,
    train_meta: TrainMeta,
}

impl From<LogisticModel> for ModelFile {
    fn from(m: LogisticModel) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            feature_order_version: FEATURE_ORDER_VERSION,
            weights: m.feature_order.iter().cloned().zip(m.weights).collect(),
            standardization: m
                .feature_order
                .iter()
                .cloned()
                .zip(m.standardization)
                .collect(),
            feature_order: m.feature_order,
            intercept: m.intercept,
            train_meta: m.train_meta,
        }
    }
}

impl TryFrom<ModelFile> for LogisticModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.format != MODEL_FORMAT || f.version != MODEL_VERSION {
            return Err(Error::Model(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, got {} v{}",
                f.format, f.version
            )));
        }
        if f.feature_order_version != FEATURE_ORDER_VERSION {
            return Err(Error::Model(format!(
                "feature order v{} is not supported (current v{FEATURE_ORDER_VERSION})",
                f.feature_order_version
            )));
        }
        if f.weights.len() != f.feature_order.len()
            || f.standardization.len() != f.feature_order.len()
        {
            return Err(Error::Model("weights keys differ from feature order".into()));
        }
        let mut weights = Vec::with_capacity(f.feature_order.len());
        let mut standardization = Vec::with_capacity(f.feature_order.len());
        for name in &f.feature_order {
            let w = *f
                .weights
                .get(name)
                .ok_or_else(|| Error::Model(format!("no weight for {name}")))?;
            let s = *f
                .standardization
                .get(name)
                .ok_or_else(|| Error::Model(format!("no standardization for {name}")))?;
            if !(w.is_finite() && s.mean.is_finite() && s.scale.is_finite() && s.scale > 0.0) {
                return Err(Error::Model(format!("non-finite parameter for {name}")));
            }
            weights.push(w);
            standardization.push(s);
        }
        if !f.intercept.is_finite() {
            return Err(Error::Model("non-finite intercept".into()));
        }
        Ok(LogisticModel {
            feature_order: f.feature_order,
            weights,
            standardization,
            intercept: f.intercept,
            train_meta: f.train_meta,
        })
    }
}

/// One feature's signed share of the pre-sigmoid logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub feature: String,
    pub value: f64,
}

/// Mean penalised negative log-likelihood and its gradient at `(w, b)` over
/// already-standardised rows.
pub fn objective(w: &[f64], b: f64, rows: &[Vec<f64>], y: &[bool], l2: f64) -> (f64, Vec<f64>, f64) {
    let n = rows.len() as f64;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; w.len()];
    let mut grad_b = 0.0;
    for (row, &label) in rows.iter().zip(y) {
        let z = b + row.iter().zip(w).map(|(x, w)| x * w).sum::<f64>();
        let target = if label { 1.0 } else { 0.0 };
        loss += bce_with_logit(z, target);
        let residual = sigmoid(z) - target;
        grad_b += residual;
        for (g, x) in grad_w.iter_mut().zip(row) {
            *g += residual * x;
        }
    }
    loss /= n;
    grad_b /= n;
    loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    for (g, w) in grad_w.iter_mut().zip(w) {
        *g = *g / n + l2 * w;
    }
    (loss, grad_w, grad_b)
}

/// Fits a model on raw rows aligned to `names`. Returns the model and the loss
/// before each epoch plus the final loss.
pub fn train_rows(
    names: &[String],
    rows: &[Vec<f64>],
    y: &[bool],
    cfg: &TrainConfig,
) -> Result<(LogisticModel, Vec<f64>)> {
    if rows.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: rows.len(),
            actual: y.len(),
        });
    }
    if rows.len() < 2 {
        return Err(Error::EmptyInput("need at least two training rows"));
    }
    let positives = y.iter().filter(|&&l| l).count();
    if positives == 0 || positives == y.len() {
        return Err(Error::SingleClass);
    }
    if !(cfg.l2 >= 0.0 && cfg.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("need l2 >= 0 and learning_rate > 0".into()));
    }
    for (r, row) in rows.iter().enumerate() {
        if row.len() != names.len() {
            return Err(Error::DimensionMismatch {
                expected: names.len(),
                actual: row.len(),
            });
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: r,
                feature: names[j].clone(),
            });
        }
    }

    let standardization: Vec<Standardizer> = (0..names.len())
        .map(|j| {
            let (mean, sd) = mean_std(rows.iter().map(move |r| r[j]));
            Standardizer {
                mean,
                scale: if sd > 1e-12 { sd } else { 1.0 },
            }
        })
        .collect();
    let scaled: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&standardization).map(|(v, s)| s.apply(*v)).collect())
        .collect();

    let mut w = vec![0.0; names.len()];
    // Intercept starts at the base-rate logit: the exact optimum of the
    // intercept-only model.
    let mut b = logit(positives as f64 / y.len() as f64);
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for _ in 0..cfg.epochs {
        let (loss, gw, gb) = objective(&w, b, &scaled, y, cfg.l2);
        losses.push(loss);
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.learning_rate * g;
        }
        b -= cfg.learning_rate * gb;
    }
    let (final_loss, _, _) = objective(&w, b, &scaled, y, cfg.l2);
    losses.push(final_loss);

    let model = LogisticModel {
        feature_order: names.to_vec(),
        weights: w,
        standardization,
        intercept: b,
        train_meta: TrainMeta {
            l2: cfg.l2,
            learning_rate: cfg.learning_rate,
            epochs: cfg.epochs,
            seed: cfg.seed,
            llm_score_mean: None,
            n_train: rows.len(),
            final_loss: Some(final_loss),
        },
    };
    Ok((model, losses))
}

/// Fits on feature vectors. When any vector carries an `llm_score`, the
/// model gains that feature; vectors lacking it are imputed with the mean of
/// the ones that have it, and the mean is stored for inference.
pub fn train(x: &[FeatureVector], y: &[bool], cfg: &TrainConfig) -> Result<LogisticModel> {
    train_with_history(x, y, cfg).map(|(m, _)| m)
}

pub fn train_with_history(
    x: &[FeatureVector],
    y: &[bool],
    cfg: &TrainConfig,
) -> Result<(LogisticModel, Vec<f64>)> {
    let llm: Vec<f64> = x.iter().filter_map(|v| v.llm_score).collect();
    let llm_mean = (!llm.is_empty()).then(|| llm.iter().sum::<f64>() / llm.len() as f64);
    let mut names: Vec<String> = BASE_FEATURES.iter().map(|s| s.to_string()).collect();
    if llm_mean.is_some() {
        names.push(LLM_SCORE.to_string());
    }
    let rows: Vec<Vec<f64>> = x
        .iter()
        .map(|v| {
            let mut row = v.values.to_vec();
            if let Some(mean) = llm_mean {
                row.push(v.llm_score.unwrap_or(mean));
            }
            row
        })
        .collect();
    let (mut model, losses) = train_rows(&names, &rows, y, cfg)?;
    model.train_meta.llm_score_mean = llm_mean;
    Ok((model, losses))
}

impl LogisticModel {
    /// A model with explicit parameters; inputs are used unstandardised.
    pub fn from_parts(names: &[&str], weights: &[f64], intercept: f64) -> Result<Self> {
        if names.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: names.len(),
                actual: weights.len(),
            });
        }
        Ok(LogisticModel {
            feature_order: names.iter().map(|s| s.to_string()).collect(),
            weights: weights.to_vec(),
            standardization: vec![Standardizer { mean: 0.0, scale: 1.0 }; names.len()],
            intercept,
            train_meta: TrainMeta {
                l2: 0.0,
                learning_rate: 0.0,
                epochs: 0,
                seed: 0,
                llm_score_mean: None,
                n_train: 0,
                final_loss: None,
            },
        })
    }

    pub fn feature_order(&self) -> &[String] {
        &self.feature_order
    }

    pub fn weight(&self, name: &str) -> Option<f64> {
        let i = self.feature_order.iter().position(|f| f == name)?;
        Some(self.weights[i])
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    pub fn train_meta(&self) -> &TrainMeta {
        &self.train_meta
    }

    pub fn has_llm_score(&self) -> bool {
        self.feature_order.iter().any(|f| f == LLM_SCORE)
    }

    /// Sets the llm-score imputation mean, e.g. on hand-built models.
    pub fn set_llm_score_mean(&mut self, mean: Option<f64>) {
        self.train_meta.llm_score_mean = mean;
    }

    fn raw_row(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        self.feature_order
            .iter()
            .map(|name| match x.get(name) {
                Some(v) => Ok(v),
                None if name == LLM_SCORE => self
                    .train_meta
                    .llm_score_mean
                    .ok_or_else(|| Error::MissingFeature(name.clone())),
                None => Err(Error::MissingFeature(name.clone())),
            })
            .collect()
    }

    fn standardized(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.feature_order.len() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_order.len(),
                actual: raw.len(),
            });
        }
        Ok(raw
            .iter()
            .zip(&self.standardization)
            .map(|(v, s)| s.apply(*v))
            .collect())
    }

    /// Contributions `w_i * x̃_i` for a raw row aligned to `feature_order`.
    pub fn contributions_row(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let x = self.standardized(raw)?;
        Ok(x.iter().zip(&self.weights).map(|(x, w)| x * w).collect())
    }

    /// Pre-sigmoid logit: intercept plus the sum of contributions.
    pub fn logit_row(&self, raw: &[f64]) -> Result<f64> {
        Ok(self.intercept + self.contributions_row(raw)?.iter().sum::<f64>())
    }

    pub fn score_row(&self, raw: &[f64]) -> Result<f64> {
        self.logit_row(raw).map(sigmoid)
    }

    /// `sigmoid(w · x̃ + b)`; a missing `llm_score` is imputed with the
    /// training mean, any other missing feature is an error.
    pub fn score(&self, x: &FeatureVector) -> Result<f64> {
        self.score_row(&self.raw_row(x)?)
    }

    pub fn contributions(&self, x: &FeatureVector) -> Result<Vec<Contribution>> {
        let values = self.contributions_row(&self.raw_row(x)?)?;
        Ok(self
            .feature_order
            .iter()
            .zip(values)
            .map(|(f, value)| Contribution {
                feature: f.clone(),
                value,
            })
            .collect())
    }

    /// Top-`k` positive contributions, largest first. These are the reasons
    /// a diff scores as risky.
    pub fn explain(&self, x: &FeatureVector, k: usize) -> Result<Vec<Contribution>> {
        let mut c: Vec<Contribution> = self
            .contributions(x)?
            .into_iter()
            .filter(|c| c.value > 0.0)
            .collect();
        c.sort_by(|a, b| b.value.total_cmp(&a.value).then_with(|| a.feature.cmp(&b.feature)));
        c.truncate(k);
        Ok(c)
    }

    /// Score with an explicit content-model score; `None` imputes the mean.
    pub fn ensemble_score(&self, x: &FeatureVector, llm_score: Option<f64>) -> Result<f64> {
        if !self.has_llm_score() {
            return Err(Error::MissingFeature(format!(
                "{LLM_SCORE} (model was trained without it)"
            )));
        }
        let llm = match llm_score {
            Some(v) => v,
            None => self
                .train_meta
                .llm_score_mean
                .ok_or_else(|| Error::Model("no stored llm_score mean".into()))?,
        };
        self.score(&x.with_llm_score(Some(llm)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i}")).collect()
    }

    #[test]
    fn separable_toy_set_is_fit_perfectly() {
        let rows = vec![
            vec![0.0, 0.0],
            vec![0.2, 0.1],
            vec![0.1, 0.4],
            vec![2.0, 2.1],
            vec![2.4, 1.9],
            vec![1.8, 2.5],
        ];
        let y = [false, false, false, true, true, true];
        let (m, _) = train_rows(&names(2), &rows, &y, &TrainConfig::default()).unwrap();
        for (row, &label) in rows.iter().zip(&y) {
            assert_eq!(m.score_row(row).unwrap() >= 0.5, label);
        }
    }

    #[test]
    fn all_zero_features_score_base_rate() {
        let rows = vec![vec![0.0; 3]; 10];
        let y: Vec<bool> = (0..10).map(|i| i < 3).collect();
        let (m, _) = train_rows(&names(3), &rows, &y, &TrainConfig::default()).unwrap();
        assert!((m.score_row(&[0.0; 3]).unwrap() - 0.3).abs() < 1e-12);
        assert!((m.score_row(&[5.0, -2.0, 1.0]).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn single_class_and_non_finite_rejected() {
        let rows = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            train_rows(&names(1), &rows, &[true, true], &TrainConfig::default()),
            Err(Error::SingleClass)
        ));
        let rows = vec![vec![1.0], vec![f64::NAN]];
        match train_rows(&names(1), &rows, &[true, false], &TrainConfig::default()) {
            Err(Error::NonFinite { row, feature }) => {
                assert_eq!(row, 1);
                assert_eq!(feature, "f0");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hand_built_scores() {
        let zero = LogisticModel::from_parts(&["a"], &[0.0], 0.0).unwrap();
        assert_eq!(zero.score_row(&[123.0]).unwrap(), 0.5);
        let one = LogisticModel::from_parts(&["a"], &[1.0], 0.0).unwrap();
        assert!((one.score_row(&[1.0]).unwrap() - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(one.score_row(&[2.0]).unwrap() > one.score_row(&[1.0]).unwrap());
    }

    #[test]
    fn explain_edge_cases() {
        let names: Vec<&str> = BASE_FEATURES.to_vec();
        let mut weights = vec![0.0; 18];
        weights[0] = -1.0;
        weights[5] = 2.0;
        weights[3] = 0.5;
        let m = LogisticModel::from_parts(&names, &weights, 0.1).unwrap();
        let mut x = FeatureVector { values: [0.0; 18], llm_score: None };
        x.values[0] = 1.0;
        assert!(m.explain(&x, 5).unwrap().is_empty(), "only negative contributions");
        x.values[5] = 1.0;
        x.values[3] = 1.0;
        let reasons = m.explain(&x, 50).unwrap();
        assert_eq!(reasons.len(), 2);
        assert_eq!(reasons[0].feature, "prior_sev_file");
        let top = m.explain(&x, 1).unwrap();
        assert_eq!(top.len(), 1);
    }

    #[test]
    fn missing_llm_feature_and_imputation() {
        let mut names: Vec<&str> = BASE_FEATURES.to_vec();
        names.push(LLM_SCORE);
        let mut weights = vec![0.1; 19];
        weights[18] = 3.0;
        let mut m = LogisticModel::from_parts(&names, &weights, -1.0).unwrap();
        let x = FeatureVector { values: [0.5; 18], llm_score: None };
        assert!(matches!(m.score(&x), Err(Error::MissingFeature(_))));
        m.set_llm_score_mean(Some(0.25));
        let imputed = m.ensemble_score(&x, None).unwrap();
        let explicit = m.ensemble_score(&x, Some(0.25)).unwrap();
        assert_eq!(imputed, explicit);
        let plain = LogisticModel::from_parts(&BASE_FEATURES, &[0.0; 18], 0.0).unwrap();
        assert!(plain.ensemble_score(&x, Some(0.3)).is_err());
    }

    #[test]
    fn zero_llm_weight_ignores_llm_score() {
        let mut names: Vec<&str> = BASE_FEATURES.to_vec();
        names.push(LLM_SCORE);
        let mut m = LogisticModel::from_parts(&names, &[0.2; 19].map(|v| v), 0.0).unwrap();
        m.weights[18] = 0.0;
        m.set_llm_score_mean(Some(0.5));
        let x = FeatureVector { values: [1.0; 18], llm_score: None };
        let a = m.ensemble_score(&x, Some(0.01)).unwrap();
        let b = m.ensemble_score(&x, Some(0.99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let rows = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5], vec![0.9, 0.2]];
        let (m, _) = train_rows(&names(2), &rows, &[false, true, false, true], &TrainConfig::default()).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"feature_order_version\":1"));
        let back: LogisticModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        let broken = text.replace("diffrisk-logreg", "other");
        assert!(serde_json::from_str::<LogisticModel>(&broken).is_err());
    }
}
