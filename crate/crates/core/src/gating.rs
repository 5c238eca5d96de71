//! Zone thresholds, gate decisions, escalations and the risk report.
//!
//! A zone's cutoff is calibrated on a reference window so that exactly
//! `floor(g * n)` window diffs are gated. Diffs are ranked by score, highest
//! first, with ties broken by lexicographically smaller id; when the gated
//! boundary falls inside a run of tied scores the cutoff remembers the last
//! gated id so the same rule applies to new diffs.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::DiffRecord;
use crate::error::{Error, Result};

/// Tolerance for `g * n` landing a hair under an integer.
const COUNT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Zone {
    pub name: String,
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatingPolicy {
    pub zones: Vec<Zone>,
}

impl Default for GatingPolicy {
    fn default() -> Self {
        let zones = [("green", 0.0), ("weekend", 0.05), ("yellow", 0.10), ("red", 0.50)]
            .into_iter()
            .map(|(name, g)| Zone { name: name.into(), g })
            .collect();
        GatingPolicy { zones }
    }
}

impl GatingPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.zones.is_empty() {
            return Err(Error::InvalidConfig("policy has no zones".into()));
        }
        let mut prev: Option<&Zone> = None;
        for zone in &self.zones {
            if zone.name.is_empty() {
                return Err(Error::InvalidConfig("zone with empty name".into()));
            }
            if !(0.0..=1.0).contains(&zone.g) {
                return Err(Error::InvalidConfig(format!(
                    "zone {:?}: gate fraction {} outside [0, 1]",
                    zone.name, zone.g
                )));
            }
            if zone.name == "green" && zone.g != 0.0 {
                return Err(Error::InvalidConfig("zone \"green\" must have g = 0".into()));
            }
            if let Some(p) = prev {
                if zone.g <= p.g {
                    return Err(Error::InvalidConfig(format!(
                        "gate fractions must increase: {:?} ({}) after {:?} ({})",
                        zone.name, zone.g, p.name, p.g
                    )));
                }
            }
            prev = Some(zone);
        }
        Ok(())
    }

    pub fn zone(&self, name: &str) -> Result<&Zone> {
        self.zones
            .iter()
            .find(|z| z.name == name)
            .ok_or_else(|| Error::UnknownZone(name.to_string()))
    }

    /// Zones with a positive gate fraction.
    pub fn gating_zones(&self) -> impl Iterator<Item = &Zone> {
        self.zones.iter().filter(|z| z.g > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Cutoff {
    /// Gates nothing.
    Never,
    /// Gates scores above `score`; at exactly `score`, gates ids up to and
    /// including `tie_id` (every id when `tie_id` is absent).
    AtLeast {
        score: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tie_id: Option<String>,
    },
}

impl Cutoff {
    pub fn gates(&self, id: &str, score: f64) -> bool {
        match self {
            Cutoff::Never => false,
            Cutoff::AtLeast { score: cut, tie_id } => {
                score > *cut || (score == *cut && tie_id.as_deref().is_none_or(|t| id <= t))
            }
        }
    }

    pub fn score(&self) -> Option<f64> {
        match self {
            Cutoff::Never => None,
            Cutoff::AtLeast { score, .. } => Some(*score),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneCutoff {
    pub zone: String,
    pub g: f64,
    pub cutoff: Cutoff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneThresholds {
    pub window: String,
    pub model: String,
    pub window_size: usize,
    pub zones: Vec<ZoneCutoff>,
}

impl ZoneThresholds {
    pub fn cutoff(&self, zone: &str) -> Result<&Cutoff> {
        self.zones
            .iter()
            .find(|z| z.zone == zone)
            .map(|z| &z.cutoff)
            .ok_or_else(|| Error::UnknownZone(zone.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Number of window diffs a zone gates.
pub fn calibrated_count(n: usize, g: f64) -> usize {
    ((g * n as f64 + COUNT_EPS).floor() as usize).min(n)
}

/// Indices of `scored` from riskiest to safest.
pub fn rank_ids(scored: &[(String, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .1
            .total_cmp(&scored[a].1)
            .then_with(|| scored[a].0.cmp(&scored[b].0))
    });
    order
}

/// Calibrates one cutoff per zone on `(id, score)` pairs of a reference
/// window.
pub fn calibrate(
    scored: &[(String, f64)],
    policy: &GatingPolicy,
    window: &str,
    model: &str,
) -> Result<ZoneThresholds> {
    if scored.is_empty() {
        return Err(Error::EmptyInput("calibration window has no scores"));
    }
    if let Some(i) = scored.iter().position(|(_, s)| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite score for {:?}",
            scored[i].0
        )));
    }
    policy.validate()?;
    let order = rank_ids(scored);
    let n = scored.len();
    let zones = policy
        .zones
        .iter()
        .map(|zone| {
            let k = calibrated_count(n, zone.g);
            let cutoff = if k == 0 {
                Cutoff::Never
            } else {
                let (id, score) = &scored[order[k - 1]];
                let straddles = k < n && scored[order[k]].1 == *score;
                Cutoff::AtLeast {
                    score: *score,
                    tie_id: straddles.then(|| id.clone()),
                }
            };
            ZoneCutoff {
                zone: zone.name.clone(),
                g: zone.g,
                cutoff,
            }
        })
        .collect();
    Ok(ZoneThresholds {
        window: window.to_string(),
        model: model.to_string(),
        window_size: n,
        zones,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Allow,
    Gate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reason {
    Feature { feature: String, contribution: f64 },
    Note { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub id: String,
    pub zone: String,
    pub score: f64,
    pub cutoff: Cutoff,
    pub decision: Decision,
    #[serde(default)]
    pub reasons: Vec<Reason>,
}

/// Gate or allow one diff. Reasons are kept only for gated diffs.
pub fn decide(
    id: &str,
    score: f64,
    zone: &str,
    thresholds: &ZoneThresholds,
    reasons: Vec<Reason>,
) -> Result<GateDecision> {
    let cutoff = thresholds.cutoff(zone)?.clone();
    let decision = if cutoff.gates(id, score) {
        Decision::Gate
    } else {
        Decision::Allow
    };
    Ok(GateDecision {
        id: id.to_string(),
        zone: zone.to_string(),
        score,
        cutoff,
        decision,
        reasons: if decision == Decision::Gate { reasons } else { Vec::new() },
    })
}

pub const ACTIONS: [&str; 3] = [
    "wait until the protected period ends and land then",
    "reduce risk: split the diff, add tests, or put the change behind a flag",
    "escalate: request manager approval with a standard reason code",
];

/// Plain-text report shown to the diff author.
pub fn render_report(diff: &DiffRecord, d: &GateDecision) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "RISK REPORT {}", diff.id);
    if !diff.title.is_empty() {
        let _ = writeln!(out, "title: {}", diff.title);
    }
    let _ = writeln!(out, "\nSCORE\n  {:.6}", d.score);
    let cutoff = match d.cutoff.score() {
        Some(s) => format!("{s:.6}"),
        None => "none (zone gates nothing)".into(),
    };
    let _ = writeln!(out, "\nZONE\n  {} (cutoff {cutoff})", d.zone);
    let decision = match d.decision {
        Decision::Allow => "ALLOW",
        Decision::Gate => "GATE",
    };
    let _ = writeln!(out, "\nDECISION\n  {decision}");
    let _ = writeln!(out, "\nREASONS");
    if d.decision == Decision::Allow {
        let _ = writeln!(out, "  none (below threshold)");
    } else if d.reasons.is_empty() {
        let _ = writeln!(out, "  no per-feature reasons available");
    } else {
        for (i, reason) in d.reasons.iter().enumerate() {
            match reason {
                Reason::Feature { feature, contribution } => {
                    let _ = writeln!(out, "  {}. {feature} (+{contribution:.4})", i + 1);
                }
                Reason::Note { text } => {
                    let _ = writeln!(out, "  {}. {text}", i + 1);
                }
            }
        }
    }
    let _ = writeln!(out, "\nACTIONS");
    if d.decision == Decision::Allow {
        let _ = writeln!(out, "  none required");
    } else {
        for (i, action) in ACTIONS.iter().enumerate() {
            let _ = writeln!(out, "  {}. {action}", i + 1);
        }
    }
    out
}

pub const DEFAULT_REASON_CODES: [&str; 5] = [
    "sev_mitigation",
    "security_fix",
    "revert",
    "test_or_docs_only",
    "business_critical",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscalationRecord {
    pub diff_id: String,
    pub reason_code: String,
    pub justification: String,
    pub approver_id: String,
    pub outcome: Outcome,
}

fn append_json_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value)? + "\n";
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Appends `rec` to the escalation log after checking its reason code.
pub fn record_escalation(
    rec: &EscalationRecord,
    valid_codes: &[String],
    log_path: impl AsRef<Path>,
) -> Result<()> {
    if !valid_codes.iter().any(|c| *c == rec.reason_code) {
        return Err(Error::InvalidReasonCode {
            code: rec.reason_code.clone(),
            valid: valid_codes.to_vec(),
        });
    }
    append_json_line(log_path.as_ref(), rec)
}

pub fn replay_escalations(log_path: impl AsRef<Path>) -> Result<Vec<EscalationRecord>> {
    read_json_lines(log_path.as_ref())
}

/// Author feedback on a report, kept as a log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackEntry {
    pub diff_id: String,
    pub helpful: bool,
    #[serde(default)]
    pub comment: String,
}

pub fn record_feedback(entry: &FeedbackEntry, log_path: impl AsRef<Path>) -> Result<()> {
    append_json_line(log_path.as_ref(), entry)
}

pub fn replay_feedback(log_path: impl AsRef<Path>) -> Result<Vec<FeedbackEntry>> {
    read_json_lines(log_path.as_ref())
}
