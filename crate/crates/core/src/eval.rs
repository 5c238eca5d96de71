//! Splits, resampling and capture-rate evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DiffRecord};
use crate::error::{Error, Result};
use crate::gating::GatingPolicy;

const COUNT_EPS: f64 = 1e-9;

/// Chronological partition boundaries. Intervals are half-open. Validation
/// starts at `train_end` and test at `val_end` unless explicit starts leave
/// a gap; records falling in a gap or at/after `test_end` are excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_end: i64,
    pub val_end: i64,
    pub test_end: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_start: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_start: Option<i64>,
}

impl SplitSpec {
    pub fn new(train_end: i64, val_end: i64, test_end: i64) -> Self {
        SplitSpec {
            train_end,
            val_end,
            test_end,
            val_start: None,
            test_start: None,
        }
    }

    pub fn val_start(&self) -> i64 {
        self.val_start.unwrap_or(self.train_end)
    }

    pub fn test_start(&self) -> i64 {
        self.test_start.unwrap_or(self.val_end)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.train_end < self.val_end
            && self.val_end < self.test_end
            && self.train_end <= self.val_start()
            && self.val_start() < self.val_end
            && self.val_end <= self.test_start()
            && self.test_start() < self.test_end;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("split boundaries not increasing: {self:?}")))
        }
    }

    pub fn partition_of(&self, closed_at: i64) -> Partition {
        if closed_at < self.train_end {
            Partition::Train
        } else if (self.val_start()..self.val_end).contains(&closed_at) {
            Partition::Val
        } else if (self.test_start()..self.test_end).contains(&closed_at) {
            Partition::Test
        } else {
            Partition::Excluded
        }
    }
}

/// Boundaries sending the first `train_frac` of the time-ordered records to
/// training, the next `val_frac` to validation and the rest to test. Fails
/// when timestamp ties collapse two boundaries.
pub fn quantile_split_spec(c: &Corpus, train_frac: f64, val_frac: f64) -> Result<SplitSpec> {
    let n = c.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 records to split, got {n}")));
    }
    if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fractions {train_frac}/{val_frac} leave no room for every partition"
        )));
    }
    let at = |f: f64| c.records()[((f * n as f64) as usize).clamp(1, n - 1)].closed_at;
    let spec = SplitSpec::new(
        at(train_frac),
        at(train_frac + val_frac),
        c.records()[n - 1].closed_at + 1,
    );
    spec.validate()
        .map_err(|_| Error::InvalidArgument(format!("timestamp ties leave an empty partition: {spec:?}")))?;
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
    Excluded,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
    /// Records in gaps between partitions or after `test_end`.
    pub excluded: Corpus,
}

pub fn chronological_split(c: &Corpus, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let part = |p: Partition| c.filter(|r| spec.partition_of(r.closed_at) == p);
    let split = Split {
        train: part(Partition::Train),
        val: part(Partition::Val),
        test: part(Partition::Test),
        excluded: part(Partition::Excluded),
    };
    for (name, p) in [("train", &split.train), ("validation", &split.val), ("test", &split.test)] {
        if p.is_empty() {
            warn!("{name} partition is empty");
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResampleConfig {
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        ResampleConfig {
            negatives_per_positive: 5,
            seed: 0,
        }
    }
}

/// Negatives kept for a given class balance.
pub fn retained_negatives(positives: usize, negatives: usize, negatives_per_positive: usize) -> usize {
    negatives.min(positives.saturating_mul(negatives_per_positive))
}

/// Keeps every positive and a uniform sample (without replacement) of
/// negatives; output stays in the input order.
pub fn resample(train: &Corpus, cfg: &ResampleConfig) -> Result<Corpus> {
    let negatives: Vec<usize> = train
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.caused_sev)
        .map(|(i, _)| i)
        .collect();
    let positives = train.len() - negatives.len();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let keep_n = retained_negatives(positives, negatives.len(), cfg.negatives_per_positive);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let chosen: BTreeSet<&str> = rand::seq::index::sample(&mut rng, negatives.len(), keep_n)
        .into_iter()
        .map(|j| train.records()[negatives[j]].id.as_str())
        .collect();
    Ok(train.filter(|r| r.caused_sev || chosen.contains(r.id.as_str())))
}

/// A model's score for one labelled diff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: String,
    pub score: f64,
    pub caused_sev: bool,
}

impl Scored {
    pub fn new(id: impl Into<String>, score: f64, caused_sev: bool) -> Self {
        Scored {
            id: id.into(),
            score,
            caused_sev,
        }
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a DiffRecord>, scores: &[f64]) -> Vec<Scored> {
        records
            .into_iter()
            .zip(scores)
            .map(|(r, s)| Scored::new(r.id.clone(), *s, r.caused_sev))
            .collect()
    }
}

/// Number of diffs gated at fraction `g` in evaluation.
pub fn gate_count(n: usize, g: f64) -> usize {
    ((g * n as f64 - COUNT_EPS).ceil().max(0.0) as usize).min(n)
}

/// Riskiest first; ties by ascending id.
pub fn rank(scored: &[Scored]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .score
            .total_cmp(&scored[a].score)
            .then_with(|| scored[a].id.cmp(&scored[b].id))
    });
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureCounts {
    pub gated: usize,
    pub sevs_total: usize,
    pub sevs_captured: usize,
}

impl CaptureCounts {
    pub fn pct(&self) -> f64 {
        100.0 * self.sevs_captured as f64 / self.sevs_total as f64
    }
}

fn check_scored(scored: &[Scored]) -> Result<usize> {
    if let Some(s) = scored.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score for {:?}", s.id)));
    }
    let sevs = scored.iter().filter(|s| s.caused_sev).count();
    if sevs == 0 {
        return Err(Error::NoPositives);
    }
    Ok(sevs)
}

fn check_g(g: f64) -> Result<()> {
    if g > 0.0 && g <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("gate fraction {g} outside (0, 1]")))
    }
}

pub fn capture_counts(scored: &[Scored], g: f64) -> Result<CaptureCounts> {
    check_g(g)?;
    let sevs_total = check_scored(scored)?;
    let gated = gate_count(scored.len(), g);
    let sevs_captured = rank(scored)[..gated]
        .iter()
        .filter(|&&i| scored[i].caused_sev)
        .count();
    Ok(CaptureCounts {
        gated,
        sevs_total,
        sevs_captured,
    })
}

/// Percentage of all SEVs among the top `ceil(g * n)` diffs.
pub fn capture_rate(scored: &[Scored], g: f64) -> Result<f64> {
    capture_counts(scored, g).map(|c| c.pct())
}

pub fn capture_ratio(model_pct: f64, baseline_pct: f64) -> Result<f64> {
    if baseline_pct == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    if !(model_pct.is_finite() && baseline_pct.is_finite()) {
        return Err(Error::InvalidArgument("non-finite capture".into()));
    }
    Ok(model_pct / baseline_pct)
}

pub fn format_ratio(ratio: f64) -> String {
    format!("{ratio:.2}x")
}

/// Mean capture of uniformly random `ceil(g * n)`-subsets.
pub fn random_gate_baseline(labels: &[bool], g: f64, trials: usize, seed: u64) -> Result<f64> {
    check_g(g)?;
    let sevs: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    if sevs.is_empty() {
        return Err(Error::NoPositives);
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let n = labels.len();
    let k = gate_count(n, g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..trials {
        let captured = rand::seq::index::sample(&mut rng, n, k)
            .into_iter()
            .filter(|&i| labels[i])
            .count();
        total += 100.0 * captured as f64 / sevs.len() as f64;
    }
    Ok(total / trials as f64)
}

/// Area under the ROC curve with ties counted as one half.
pub fn auc(scored: &[Scored]) -> Result<f64> {
    let pos = check_scored(scored)?;
    let neg = scored.len() - pos;
    if neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].score.total_cmp(&scored[b].score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].score == scored[order[i]].score {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid_rank * (i..=j).filter(|&t| scored[order[t]].caused_sev).count() as f64;
        i = j + 1;
    }
    Ok((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos as f64 * neg as f64))
}

/// Capture at g = 1%, 2%, ..., 100%.
pub fn capture_curve(scored: &[Scored]) -> Result<Vec<(f64, f64)>> {
    (1..=100)
        .map(|p| {
            let g = p as f64 / 100.0;
            capture_rate(scored, g).map(|c| (g, c))
        })
        .collect()
}

pub fn write_curve_csv(curves: &[(String, Vec<(f64, f64)>)], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "g", "capture_pct"])?;
    for (model, curve) in curves {
        for (g, c) in curve {
            out.write_record([model.as_str(), &format!("{g:.2}"), &format!("{c:.4}")])?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub zone: String,
    pub g: f64,
    pub capture_pct: f64,
    /// `None` when the baseline captures nothing at this zone.
    pub ratio_vs_baseline: Option<f64>,
    pub counts: CaptureCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub cells: Vec<EvalCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub baseline: String,
    pub n: usize,
    pub rows: Vec<EvalRow>,
}

fn label_set(scored: &[Scored]) -> BTreeMap<&str, bool> {
    scored.iter().map(|s| (s.id.as_str(), s.caused_sev)).collect()
}

/// Capture and ratio-vs-baseline for every model at every gating zone.
pub fn evaluate_models(
    models: &[(String, Vec<Scored>)],
    baseline: &str,
    policy: &GatingPolicy,
) -> Result<EvalReport> {
    policy.validate()?;
    let (_, base_scores) = models
        .iter()
        .find(|(name, _)| name == baseline)
        .ok_or_else(|| Error::InvalidArgument(format!("baseline model {baseline:?} not among models")))?;
    let reference = label_set(base_scores);
    if reference.len() != base_scores.len() {
        return Err(Error::MismatchedTestSets(format!("duplicate ids in {baseline:?}")));
    }
    for (name, scored) in models {
        if scored.len() != base_scores.len() || label_set(scored) != reference {
            return Err(Error::MismatchedTestSets(format!(
                "{name:?} was not scored on the same labelled diffs as {baseline:?}"
            )));
        }
    }
    let mut base_pct = BTreeMap::new();
    for zone in policy.gating_zones() {
        base_pct.insert(zone.name.as_str(), capture_rate(base_scores, zone.g)?);
    }
    let mut rows = Vec::new();
    for (name, scored) in models {
        let mut cells = Vec::new();
        for zone in policy.gating_zones() {
            let counts = capture_counts(scored, zone.g)?;
            let capture_pct = counts.pct();
            cells.push(EvalCell {
                zone: zone.name.clone(),
                g: zone.g,
                capture_pct,
                ratio_vs_baseline: capture_ratio(capture_pct, base_pct[zone.name.as_str()]).ok(),
                counts,
            });
        }
        rows.push(EvalRow {
            model: name.clone(),
            cells,
        });
    }
    Ok(EvalReport {
        baseline: baseline.to_string(),
        n: base_scores.len(),
        rows,
    })
}

impl EvalReport {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "model",
            "zone",
            "g",
            "capture_pct",
            "ratio_vs_baseline",
            "gated",
            "sevs_total",
            "sevs_captured",
        ])?;
        for row in &self.rows {
            for c in &row.cells {
                out.write_record([
                    row.model.clone(),
                    c.zone.clone(),
                    format!("{:.2}", c.g),
                    format!("{:.1}", c.capture_pct),
                    c.ratio_vs_baseline.map_or_else(String::new, |r| format!("{r:.2}")),
                    c.counts.gated.to_string(),
                    c.counts.sevs_total.to_string(),
                    c.counts.sevs_captured.to_string(),
                ])?;
            }
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// Models as rows; per zone a capture column and a ratio column.
    pub fn to_table(&self) -> String {
        let mut header = vec!["Model".to_string()];
        if let Some(first) = self.rows.first() {
            for c in &first.cells {
                header.push(format!("{} ({:.0}%)", c.zone, c.g * 100.0));
                header.push(format!("vs {}", self.baseline));
            }
        }
        let mut lines = vec![header];
        for row in &self.rows {
            let mut line = vec![row.model.clone()];
            for c in &row.cells {
                line.push(format!("{:.1}%", c.capture_pct));
                line.push(c.ratio_vs_baseline.map_or_else(|| "n/a".into(), format_ratio));
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|j| lines.iter().map(|l| l[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, line) in lines.iter().enumerate() {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (cell, w))| {
                    if j == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }
}

fn top_component(path: &str) -> &str {
    path.split('/').next().unwrap_or(path)
}

/// Fails when the corpora share an org, a diff id or a top-level directory.
pub fn check_disjoint(train: &Corpus, foreign: &Corpus) -> Result<()> {
    let orgs: BTreeSet<&str> = train.records().iter().map(|r| r.org.as_str()).collect();
    if let Some(r) = foreign.records().iter().find(|r| orgs.contains(r.org.as_str())) {
        return Err(Error::Overlap(format!("org {:?} appears in both corpora", r.org)));
    }
    if let Some(r) = foreign.records().iter().find(|r| train.get(&r.id).is_some()) {
        return Err(Error::Overlap(format!("diff {:?} appears in both corpora", r.id)));
    }
    let prefixes: BTreeSet<&str> = train
        .records()
        .iter()
        .flat_map(|r| r.changes.iter().map(|c| top_component(&c.path)))
        .collect();
    for r in foreign.records() {
        if let Some(c) = r.changes.iter().find(|c| prefixes.contains(top_component(&c.path))) {
            return Err(Error::Overlap(format!(
                "path prefix {:?} appears in both corpora",
                top_component(&c.path)
            )));
        }
    }
    Ok(())
}

/// [`evaluate_models`] on a foreign organisation's corpus after checking it
/// shares nothing with the training corpus.
pub fn generalization_eval(
    train: &Corpus,
    foreign: &Corpus,
    models: &[(String, Vec<Scored>)],
    baseline: &str,
    policy: &GatingPolicy,
) -> Result<EvalReport> {
    check_disjoint(train, foreign)?;
    let ids: BTreeSet<&str> = foreign.records().iter().map(|r| r.id.as_str()).collect();
    for (name, scored) in models {
        if scored.len() != ids.len() || scored.iter().any(|s| !ids.contains(s.id.as_str())) {
            return Err(Error::MismatchedTestSets(format!(
                "{name:?} was not scored on the foreign corpus"
            )));
        }
    }
    evaluate_models(models, baseline, policy)
}
