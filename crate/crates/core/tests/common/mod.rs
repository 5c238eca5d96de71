//! Generators and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use diffrisk::corpus::{language_for_path, Corpus, DiffRecord, FileChange, Provenance};
use diffrisk::unidiff::{Hunk, HunkLine, LineTag};
use proptest::prelude::*;

pub fn arb_path() -> impl Strategy<Value = String> {
    "[a-z]{1,6}(/[a-z0-9_]{1,6}){0,2}\\.(py|rs|go|java|cpp|kt|js|txt)"
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Modified,
    New,
    Deleted,
}

fn arb_tag(kind: Kind) -> BoxedStrategy<LineTag> {
    match kind {
        Kind::New => Just(LineTag::Add).boxed(),
        Kind::Deleted => Just(LineTag::Del).boxed(),
        Kind::Modified => prop_oneof![Just(LineTag::Context), Just(LineTag::Add), Just(LineTag::Del)].boxed(),
    }
}

/// A hunk whose missing-newline flags survive a render/parse cycle: a flag
/// on a side whose last line is context also implies the other side's flag.
pub fn arb_hunk(kind: Kind) -> impl Strategy<Value = Hunk> {
    (
        prop::collection::vec((arb_tag(kind), "\\PC{0,10}"), 1..8),
        0u64..10_000,
        0u64..10_000,
        "[a-z(){} ]{0,10}",
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(lines, old_start, new_start, section, old_eof, new_eof)| {
            let lines: Vec<HunkLine> = lines.into_iter().map(|(t, s)| HunkLine::new(t, s)).collect();
            let mut h = Hunk::from_lines(old_start, new_start, lines);
            h.section = section;
            let last_old = h.lines.iter().rposition(|l| l.tag != LineTag::Add);
            let last_new = h.lines.iter().rposition(|l| l.tag != LineTag::Del);
            h.old_missing_newline = old_eof && last_old.is_some();
            h.new_missing_newline = new_eof && last_new.is_some();
            if h.old_missing_newline && last_old.is_some_and(|i| h.lines[i].tag == LineTag::Context) {
                h.new_missing_newline = true;
            }
            if h.new_missing_newline && last_new.is_some_and(|i| h.lines[i].tag == LineTag::Context) {
                h.old_missing_newline = true;
            }
            h
        })
}

/// A file change in the exact form the parser produces.
pub fn arb_change() -> impl Strategy<Value = FileChange> {
    let kind = prop_oneof![Just(Kind::Modified), Just(Kind::New), Just(Kind::Deleted)];
    (kind, arb_path(), prop::option::of(arb_path()), any::<bool>())
        .prop_flat_map(|(kind, path, old, binary)| {
            let hunks = if binary {
                Just(Vec::new()).boxed()
            } else {
                prop::collection::vec(arb_hunk(kind), 0..3).boxed()
            };
            (Just(kind), Just(path), Just(old), Just(binary), hunks)
        })
        .prop_map(|(kind, path, old, binary, hunks)| {
            let mut c = FileChange::new(path.clone());
            c.language = language_for_path(&path).to_string();
            c.is_new_file = kind == Kind::New;
            c.is_deleted = kind == Kind::Deleted;
            c.is_binary = binary;
            if kind == Kind::Modified {
                c.old_path = old.filter(|o| *o != path);
            }
            for h in &hunks {
                for l in &h.lines {
                    match l.tag {
                        LineTag::Add => c.added.push(l.text.clone()),
                        LineTag::Del => c.deleted.push(l.text.clone()),
                        LineTag::Context => {}
                    }
                }
            }
            c.hunks = hunks;
            if c.is_new_file {
                c.file_size_after = c.added.len() as u64;
            }
            c
        })
}

/// Changes with distinct paths, as one patch would contain.
pub fn arb_patch() -> impl Strategy<Value = Vec<FileChange>> {
    prop::collection::vec(arb_change(), 1..5).prop_map(|mut cs| {
        let mut seen = std::collections::HashSet::new();
        cs.retain(|c| seen.insert(c.path.clone()));
        cs
    })
}

pub fn arb_record(i: usize) -> impl Strategy<Value = DiffRecord> {
    (
        any::<String>(),
        any::<String>(),
        "[a-z]{1,8}",
        1i64..2_000_000_000,
        "[a-zA-Z]{1,5}",
        prop::collection::vec(arb_change(), 1..4),
        any::<bool>(),
    )
        .prop_map(move |(title, test_plan, author, closed_at, org, changes, sev)| DiffRecord {
            id: format!("D{i}"),
            title,
            test_plan,
            author_id: author,
            closed_at,
            org,
            changes,
            caused_sev: sev,
            metadata_only: false,
        })
}

pub fn arb_corpus(max: usize) -> impl Strategy<Value = Corpus> {
    (0..=max)
        .prop_flat_map(|n| (0..n).map(arb_record).collect::<Vec<_>>())
        .prop_map(|records| Corpus::new(records, Provenance::Jsonl, None).expect("valid generated corpus"))
}

/// Smallest k with k >= g*n, allowing for float noise in g*n.
pub fn brute_eval_count(n: usize, g: f64) -> usize {
    (0..=n).find(|&k| k as f64 >= g * n as f64 - 1e-9).unwrap_or(n)
}

/// Largest k with k <= g*n, allowing for float noise in g*n.
pub fn brute_calibrated_count(n: usize, g: f64) -> usize {
    (0..=n).rev().find(|&k| k as f64 <= g * n as f64 + 1e-9).unwrap_or(0)
}

/// Number of items ranked strictly ahead of item `i` (higher score, or equal
/// score and smaller id).
pub fn ahead_of(items: &[(String, f64)], i: usize) -> usize {
    let (id, s) = &items[i];
    items
        .iter()
        .filter(|(jd, js)| js > s || (js == s && jd < id))
        .count()
}

/// Gated flags when the top `k` items are gated.
pub fn brute_top_k(items: &[(String, f64)], k: usize) -> Vec<bool> {
    (0..items.len()).map(|i| ahead_of(items, i) < k).collect()
}

/// Capture percentage by enumeration.
pub fn brute_capture(items: &[(String, f64)], labels: &[bool], g: f64) -> f64 {
    let gated = brute_top_k(items, brute_eval_count(items.len(), g));
    let total = labels.iter().filter(|&&l| l).count();
    let hit = gated.iter().zip(labels).filter(|(g, l)| **g && **l).count();
    100.0 * hit as f64 / total as f64
}

/// `||a - b|| / (||a|| + ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let denom = norm(a) + norm(b);
    if denom == 0.0 {
        0.0
    } else {
        norm(&diff) / denom
    }
}
