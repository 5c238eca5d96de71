//! Feed-forward classifier over pooled embeddings.
//!
//! Hidden layers use `tanh`; the single output unit is a logit passed
//! through a sigmoid. Training minimises mean binary cross-entropy with Adam
//! on seeded mini-batches.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{bce_with_logit, mean_std, sigmoid};

pub const HIDDEN: [usize; 3] = [100, 150, 50];

/// Dense layer; `w` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for k in 0..self.outputs {
            let row = &self.w[k * self.inputs..(k + 1) * self.inputs];
            out.push(self.b[k] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// All weights and biases zero. `sizes` runs from input to output and
    /// must end in 1.
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2 && sizes[sizes.len() - 1] == 1, "bad layer sizes {sizes:?}");
        let layers = sizes
            .windows(2)
            .map(|p| Layer {
                inputs: p[0],
                outputs: p[1],
                w: vec![0.0; p[0] * p[1]],
                b: vec![0.0; p[1]],
            })
            .collect();
        Mlp { layers }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(sizes: &[usize], rng: &mut impl Rng) -> Self {
        let mut m = Mlp::zeros(sizes);
        for layer in &mut m.layers {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.w {
                *w = rng.random_range(-limit..limit);
            }
        }
        m
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    /// Activations of every layer, input first, output logit last.
    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(&acts[i], &mut out);
            if i < last {
                for v in &mut out {
                    *v = v.tanh();
                }
            }
            acts.push(out);
        }
        acts
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.trace(x).last().expect("output layer")[0]
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Weights then biases, layer by layer.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            p.extend_from_slice(&l.w);
            p.extend_from_slice(&l.b);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params());
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&p[at..at + nw]);
            at += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&p[at..at + nb]);
            at += nb;
        }
    }

    /// Mean cross-entropy over the rows and its gradient in [`Mlp::params`]
    /// order.
    pub fn loss_and_grad(&self, xs: &[&[f64]], ys: &[bool]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.n_params()];
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |at, l| {
                let o = *at;
                *at += l.w.len() + l.b.len();
                Some(o)
            })
            .collect();
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let acts = self.trace(x);
            let z = acts.last().expect("output")[0];
            let target = if y { 1.0 } else { 0.0 };
            loss += bce_with_logit(z, target);
            let mut delta = vec![sigmoid(z) - target];
            for i in (0..self.layers.len()).rev() {
                let layer = &self.layers[i];
                let input = &acts[i];
                let g = &mut grad[offsets[i]..offsets[i] + layer.w.len() + layer.b.len()];
                for (k, d) in delta.iter().enumerate() {
                    let row = &mut g[k * layer.inputs..(k + 1) * layer.inputs];
                    for (gw, a) in row.iter_mut().zip(input) {
                        *gw += d * a;
                    }
                    g[layer.w.len() + k] += d;
                }
                if i > 0 {
                    let mut prev = vec![0.0; layer.inputs];
                    for (k, d) in delta.iter().enumerate() {
                        let row = &layer.w[k * layer.inputs..(k + 1) * layer.inputs];
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += w * d;
                        }
                    }
                    for (p, a) in prev.iter_mut().zip(input) {
                        *p *= 1.0 - a * a;
                    }
                    delta = prev;
                }
            }
        }
        let n = xs.len() as f64;
        for g in &mut grad {
            *g /= n;
        }
        (loss / n, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            learning_rate: 3e-3,
            epochs: 60,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpTrainMeta {
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_train: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
}

const MODEL_FORMAT: &str = "diffrisk-mlp";
const MODEL_VERSION: u32 = 1;

/// Input standardisation plus the (d, 100, 150, 50, 1) network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifier {
    pub format: String,
    pub version: u32,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub network: Mlp,
    pub train_meta: MlpTrainMeta,
}

fn architecture(d: usize) -> Vec<usize> {
    let mut s = vec![d];
    s.extend(HIDDEN);
    s.push(1);
    s
}

impl MlpClassifier {
    /// Untrained classifier with zero parameters; scores 0.5 everywhere.
    pub fn zeros(d: usize) -> Self {
        MlpClassifier {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            input_mean: vec![0.0; d],
            input_scale: vec![1.0; d],
            network: Mlp::zeros(&architecture(d)),
            train_meta: MlpTrainMeta {
                seed: 0,
                learning_rate: 0.0,
                epochs: 0,
                batch_size: 0,
                n_train: 0,
                initial_loss: None,
                final_loss: None,
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_mean.len()
    }

    fn standardize(&self, e: &[f64]) -> Vec<f64> {
        e.iter()
            .zip(self.input_mean.iter().zip(&self.input_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::Model(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, got {} v{}",
                self.format, self.version
            )));
        }
        let d = self.input_mean.len();
        if self.input_scale.len() != d || self.network.layers.is_empty() || self.network.sizes() != architecture(d) {
            return Err(Error::Model(format!(
                "network shape {:?} does not match input dim {d}",
                self.network.layers.iter().map(|l| (l.inputs, l.outputs)).collect::<Vec<_>>()
            )));
        }
        for l in &self.network.layers {
            if l.w.len() != l.inputs * l.outputs || l.b.len() != l.outputs {
                return Err(Error::Model("layer parameter count mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: MlpClassifier = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

/// Probability that the embedded diff is SEV-causing.
pub fn mlp_score(m: &MlpClassifier, e: &[f64]) -> Result<f64> {
    if e.len() != m.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: m.input_dim(),
            actual: e.len(),
        });
    }
    Ok(sigmoid(m.network.logit(&m.standardize(e))))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains a network of any shape on already-prepared rows. Returns the full
/// training loss before and after.
pub fn fit(net: &mut Mlp, xs: &[Vec<f64>], ys: &[bool], cfg: &MlpConfig, rng: &mut impl Rng) -> (f64, f64) {
    let all: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let (initial, _) = net.loss_and_grad(&all, ys);
    let mut params = net.params();
    let mut adam = Adam::new(params.len());
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let batch = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let bx: Vec<&[f64]> = chunk.iter().map(|&i| xs[i].as_slice()).collect();
            let by: Vec<bool> = chunk.iter().map(|&i| ys[i]).collect();
            let (_, grad) = net.loss_and_grad(&bx, &by);
            adam.step(&mut params, &grad, cfg.learning_rate);
            net.set_params(&params);
        }
    }
    let (final_loss, _) = net.loss_and_grad(&all, ys);
    (initial, final_loss)
}

/// Trains the (d, 100, 150, 50, 1) classifier on pooled embeddings.
pub fn train_mlp(e: &[Vec<f64>], y: &[bool], cfg: &MlpConfig) -> Result<MlpClassifier> {
    if e.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: e.len(),
            actual: y.len(),
        });
    }
    if e.len() < 2 {
        return Err(Error::EmptyInput("need at least two embeddings"));
    }
    let positives = y.iter().filter(|&&l| l).count();
    if positives == 0 || positives == y.len() {
        return Err(Error::SingleClass);
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("learning_rate must be positive".into()));
    }
    let d = e[0].len();
    if d == 0 {
        return Err(Error::EmptyInput("embeddings have zero dimensions"));
    }
    for (r, row) in e.iter().enumerate() {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: row.len(),
            });
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: r,
                feature: format!("embedding[{j}]"),
            });
        }
    }
    let mut input_mean = Vec::with_capacity(d);
    let mut input_scale = Vec::with_capacity(d);
    for j in 0..d {
        let (m, s) = mean_std(e.iter().map(move |r| r[j]));
        input_mean.push(m);
        input_scale.push(if s > 1e-12 { s } else { 1.0 });
    }
    let xs: Vec<Vec<f64>> = e
        .iter()
        .map(|r| {
            r.iter()
                .zip(input_mean.iter().zip(&input_scale))
                .map(|(v, (m, s))| (v - m) / s)
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut network = Mlp::glorot(&architecture(d), &mut rng);
    let (initial_loss, final_loss) = fit(&mut network, &xs, y, cfg, &mut rng);
    Ok(MlpClassifier {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        input_mean,
        input_scale,
        network,
        train_meta: MlpTrainMeta {
            seed: cfg.seed,
            learning_rate: cfg.learning_rate,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            n_train: e.len(),
            initial_loss: Some(initial_loss),
            final_loss: Some(final_loss),
        },
    })
}
