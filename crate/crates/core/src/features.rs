//! As-of-landing-time history index and the regression feature vector.
//!
//! Every measure is computed only from diffs closed strictly before the diff
//! being scored. [`FeatureTable::build`] sweeps a corpus once in time order,
//! which is equivalent to calling [`build_history`] + [`extract`] per diff.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DiffRecord, FileChange, DEFAULT_LANGUAGES};
use crate::error::{Error, Result};

/// Bumped whenever [`BASE_FEATURES`] changes order or meaning.
pub const FEATURE_ORDER_VERSION: u32 = 1;

pub const BASE_FEATURES: [&str; 18] = [
    "churn_ratio_log",
    "new_files",
    "only_new_files",
    "n_files_log",
    "n_prior_authors_log",
    "prior_sev_file",
    "prior_sev_folder",
    "critical_service",
    "complexity_total",
    "lang_1",
    "lang_2",
    "lang_3",
    "lang_4",
    "lang_5",
    "lang_6",
    "lang_7",
    "author_is_creator",
    "author_prior_diffs_log",
];

/// Optional ensemble feature carrying a content model's score.
pub const LLM_SCORE: &str = "llm_score";

const LANG_OFFSET: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplexityMode {
    /// Lines containing a branching keyword (if/for/while/case/catch).
    #[default]
    BranchLines,
    /// Plain line count of the file.
    LineCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub languages: Vec<String>,
    pub critical_prefixes: Vec<String>,
    pub complexity_mode: ComplexityMode,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            languages: DEFAULT_LANGUAGES.iter().map(|s| s.to_string()).collect(),
            critical_prefixes: Vec::new(),
            complexity_mode: ComplexityMode::default(),
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.languages.len() != 7 {
            return Err(Error::InvalidConfig(format!(
                "exactly 7 languages required, got {}",
                self.languages.len()
            )));
        }
        let unique: HashSet<_> = self.languages.iter().collect();
        if unique.len() != 7 {
            return Err(Error::InvalidConfig("duplicate language in list".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: [f64; 18],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_score: Option<f64>,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        if name == LLM_SCORE {
            return self.llm_score;
        }
        BASE_FEATURES
            .iter()
            .position(|&f| f == name)
            .map(|i| self.values[i])
    }

    pub fn with_llm_score(mut self, score: Option<f64>) -> Self {
        self.llm_score = score;
        self
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        BASE_FEATURES.iter().copied().zip(self.values.iter().copied())
    }
}

fn is_branch_line(line: &str) -> bool {
    line.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .any(|tok| matches!(tok, "if" | "for" | "while" | "case" | "catch"))
}

fn line_complexity(mode: ComplexityMode, lines: &[String]) -> f64 {
    match mode {
        ComplexityMode::BranchLines => lines.iter().filter(|l| is_branch_line(l)).count() as f64,
        ComplexityMode::LineCount => lines.len() as f64,
    }
}

/// Immediate parent directory of a path (`""` for top-level files).
pub fn folder_of(path: &str) -> &str {
    path.rsplit_once('/').map_or("", |(dir, _)| dir)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FileHistory {
    pub prior_sev: bool,
    pub creator: Option<String>,
    pub authors: BTreeSet<String>,
    pub complexity: f64,
}

/// Per-file, per-folder and per-author aggregates over diffs closed strictly
/// before `as_of`.
#[derive(Debug, Clone)]
pub struct HistoryIndex {
    as_of: i64,
    files: HashMap<String, FileHistory>,
    sev_folders: HashSet<String>,
    author_diffs: HashMap<String, u64>,
    cfg: FeatureConfig,
}

static EMPTY_FILE: FileHistory = FileHistory {
    prior_sev: false,
    creator: None,
    authors: BTreeSet::new(),
    complexity: 0.0,
};

impl HistoryIndex {
    pub fn new(as_of: i64, cfg: &FeatureConfig) -> Self {
        HistoryIndex {
            as_of,
            files: HashMap::new(),
            sev_folders: HashSet::new(),
            author_diffs: HashMap::new(),
            cfg: cfg.clone(),
        }
    }

    pub fn as_of(&self) -> i64 {
        self.as_of
    }

    /// Moves the cutoff forward. Records already absorbed stay valid.
    pub fn advance_to(&mut self, as_of: i64) {
        assert!(as_of >= self.as_of, "history cannot move backwards");
        self.as_of = as_of;
    }

    /// Neutral defaults for files never seen.
    pub fn file(&self, path: &str) -> &FileHistory {
        self.files.get(path).unwrap_or(&EMPTY_FILE)
    }

    pub fn folder_prior_sev(&self, folder: &str) -> bool {
        self.sev_folders.contains(folder)
    }

    pub fn author_prior_diffs(&self, author: &str) -> u64 {
        self.author_diffs.get(author).copied().unwrap_or(0)
    }

    pub fn is_critical(&self, path: &str) -> bool {
        self.cfg
            .critical_prefixes
            .iter()
            .any(|p| path.starts_with(p.as_str()))
    }

    /// Adds one past diff. Panics if the diff is not strictly before `as_of`.
    pub fn absorb(&mut self, record: &DiffRecord) {
        assert!(
            record.closed_at < self.as_of,
            "diff {} at {} is not before as_of {}",
            record.id,
            record.closed_at,
            self.as_of
        );
        *self.author_diffs.entry(record.author_id.clone()).or_default() += 1;
        let mode = self.cfg.complexity_mode;
        for change in &record.changes {
            if let Some(old) = change.old_path.as_deref() {
                if let Some(moved) = self.files.remove(old) {
                    self.files.insert(change.path.clone(), moved);
                }
            }
            let entry = self.files.entry(change.path.clone()).or_default();
            if change.is_new_file {
                entry.creator = Some(record.author_id.clone());
                entry.complexity = 0.0;
            } else if entry.creator.is_none() {
                entry.creator = Some(record.author_id.clone());
            }
            entry.authors.insert(record.author_id.clone());
            entry.complexity = if change.is_deleted {
                0.0
            } else {
                (entry.complexity + line_complexity(mode, &change.added)
                    - line_complexity(mode, &change.deleted))
                .max(0.0)
            };
            if record.caused_sev {
                entry.prior_sev = true;
                self.sev_folders.insert(folder_of(&change.path).to_string());
            }
        }
    }

    fn touched_history<'a>(&'a self, change: &FileChange) -> &'a FileHistory {
        match self.files.get(&change.path) {
            Some(h) => h,
            None => change
                .old_path
                .as_deref()
                .map_or(&EMPTY_FILE, |old| self.file(old)),
        }
    }
}

/// History of all corpus records closed strictly before `as_of`.
pub fn build_history(corpus: &Corpus, as_of: i64, cfg: &FeatureConfig) -> HistoryIndex {
    let mut index = HistoryIndex::new(as_of, cfg);
    for record in corpus.records().iter().filter(|r| r.closed_at < as_of) {
        index.absorb(record);
    }
    index
}

/// Feature vector of `diff` against a history cut at the diff's close time.
pub fn extract(diff: &DiffRecord, history: &HistoryIndex) -> Result<FeatureVector> {
    if diff.changes.is_empty() {
        return Err(Error::NoFileChanges(diff.id.clone()));
    }
    if history.as_of != diff.closed_at {
        return Err(Error::InvalidArgument(format!(
            "history as_of {} does not match closed_at {} of {}",
            history.as_of, diff.closed_at, diff.id
        )));
    }
    let mode = history.cfg.complexity_mode;
    let mut v = [0.0; 18];

    let churn: usize = diff.changes.iter().map(FileChange::churn).sum();
    let size: u64 = diff.changes.iter().map(|c| c.file_size_after).sum();
    v[0] = ((churn as f64 + 1.0) / (size as f64 + 1.0)).ln();
    v[1] = flag(diff.changes.iter().any(|c| c.is_new_file));
    v[2] = flag(diff.changes.iter().all(|c| c.is_new_file));
    v[3] = (1.0 + diff.changes.len() as f64).ln();

    let mut prior_authors = 0usize;
    let mut prior_sev_file = false;
    let mut prior_sev_folder = false;
    let mut critical = false;
    let mut complexity = 0.0;
    let mut is_creator = false;
    for change in &diff.changes {
        let h = history.touched_history(change);
        prior_authors += h.authors.len();
        prior_sev_file |= h.prior_sev;
        prior_sev_folder |= history.folder_prior_sev(folder_of(&change.path))
            || change
                .old_path
                .as_deref()
                .is_some_and(|old| history.folder_prior_sev(folder_of(old)));
        critical |= history.is_critical(&change.path);
        is_creator |= h.creator.as_deref() == Some(diff.author_id.as_str());
        if !change.is_deleted {
            let base = if change.is_new_file { 0.0 } else { h.complexity };
            complexity += (base + line_complexity(mode, &change.added)
                - line_complexity(mode, &change.deleted))
            .max(0.0);
        }
    }
    v[4] = (1.0 + prior_authors as f64).ln();
    v[5] = flag(prior_sev_file);
    v[6] = flag(prior_sev_folder);
    v[7] = flag(critical);
    v[8] = complexity;
    for (k, lang) in history.cfg.languages.iter().enumerate().take(7) {
        v[LANG_OFFSET + k] = flag(diff.changes.iter().any(|c| &c.language == lang));
    }
    v[16] = flag(is_creator);
    v[17] = (1.0 + history.author_prior_diffs(&diff.author_id) as f64).ln();

    Ok(FeatureVector {
        values: v,
        llm_score: None,
    })
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Features for every non-metadata record of a corpus, leak-free.
#[derive(Debug, Clone, Default)]
pub struct FeatureTable {
    by_id: HashMap<String, FeatureVector>,
}

impl FeatureTable {
    pub fn build(corpus: &Corpus, cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let records = corpus.records();
        let mut index = HistoryIndex::new(i64::MIN, cfg);
        let mut by_id = HashMap::with_capacity(records.len());
        let mut start = 0;
        while start < records.len() {
            let t = records[start].closed_at;
            let end = start
                + records[start..]
                    .iter()
                    .take_while(|r| r.closed_at == t)
                    .count();
            index.advance_to(t);
            for r in &records[start..end] {
                if !r.metadata_only && !r.changes.is_empty() {
                    by_id.insert(r.id.clone(), extract(r, &index)?);
                }
            }
            // Same-timestamp diffs are not each other's history; absorb after.
            index.advance_to(t.saturating_add(1));
            for r in &records[start..end] {
                index.absorb(r);
            }
            start = end;
        }
        Ok(FeatureTable { by_id })
    }

    pub fn get(&self, id: &str) -> Option<&FeatureVector> {
        self.by_id.get(id)
    }

    pub fn require(&self, id: &str) -> Result<&FeatureVector> {
        self.by_id.get(id).ok_or_else(|| Error::NoFileChanges(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Provenance;

    fn change(path: &str, added: usize, deleted: usize, size: u64, new: bool) -> FileChange {
        let mut c = FileChange::new(path);
        c.added = (0..added).map(|i| format!("x{i} = 1")).collect();
        c.deleted = (0..deleted).map(|i| format!("y{i} = 2")).collect();
        c.file_size_after = size;
        c.is_new_file = new;
        c
    }

    fn diff(id: &str, t: i64, author: &str, sev: bool, changes: Vec<FileChange>) -> DiffRecord {
        DiffRecord {
            id: id.into(),
            title: id.into(),
            test_plan: String::new(),
            author_id: author.into(),
            closed_at: t,
            org: "o".into(),
            changes,
            caused_sev: sev,
            metadata_only: false,
        }
    }

    fn corpus(records: Vec<DiffRecord>) -> Corpus {
        Corpus::new(records, Provenance::Jsonl, None).unwrap()
    }

    fn idx(name: &str) -> usize {
        BASE_FEATURES.iter().position(|&f| f == name).unwrap()
    }

    #[test]
    fn empty_history_is_neutral() {
        let c = corpus(vec![diff("a", 100, "x", true, vec![change("d/f.py", 1, 0, 5, false)])]);
        let h = build_history(&c, 50, &FeatureConfig::default());
        assert_eq!(h.file("d/f.py"), &FileHistory::default());
        assert!(!h.folder_prior_sev("d"));
        assert_eq!(h.author_prior_diffs("x"), 0);
    }

    #[test]
    fn sev_marks_file_and_parent_folder() {
        let c = corpus(vec![diff("a", 100, "x", true, vec![change("d/e/f.py", 1, 0, 5, false)])]);
        let h = build_history(&c, 101, &FeatureConfig::default());
        assert!(h.file("d/e/f.py").prior_sev);
        assert!(h.folder_prior_sev("d/e"));
        assert!(!h.folder_prior_sev("d"));
        let at = build_history(&c, 100, &FeatureConfig::default());
        assert!(!at.file("d/e/f.py").prior_sev, "cutoff must be strict");
    }

    #[test]
    fn author_prior_count_brute_force() {
        let times = [10, 20, 30, 40, 50];
        let records: Vec<_> = times
            .iter()
            .map(|&t| diff(&format!("d{t}"), t, "alice", false, vec![change("f.py", 1, 0, 1, false)]))
            .collect();
        let c = corpus(records);
        let as_of = 35;
        let brute = c
            .records()
            .iter()
            .filter(|r| r.author_id == "alice" && r.closed_at < as_of)
            .count() as u64;
        let h = build_history(&c, as_of, &FeatureConfig::default());
        assert_eq!(brute, 3);
        assert_eq!(h.author_prior_diffs("alice"), brute);
    }

    #[test]
    fn only_new_files() {
        let d = diff("a", 10, "x", false, vec![change("n/a.py", 3, 0, 3, true), change("n/b.rs", 2, 0, 2, true)]);
        let h = HistoryIndex::new(10, &FeatureConfig::default());
        let f = extract(&d, &h).unwrap();
        assert_eq!(f.values[idx("new_files")], 1.0);
        assert_eq!(f.values[idx("only_new_files")], 1.0);
        assert_eq!(f.values[idx("prior_sev_file")], 0.0);
        assert_eq!(f.values[idx("lang_1")], 1.0); // python
        assert_eq!(f.values[idx("lang_7")], 1.0); // rust
        assert_eq!(f.values[idx("lang_2")], 0.0);
    }

    #[test]
    fn churn_ratio_and_file_count_by_hand() {
        let d = diff("a", 10, "x", false, vec![change("f.py", 50, 10, 600, false)]);
        let f = extract(&d, &HistoryIndex::new(10, &FeatureConfig::default())).unwrap();
        let expected = (61.0f64 / 601.0).ln();
        assert!((f.values[0] - expected).abs() < 1e-12);
        assert!((f.values[0] - (-2.288)).abs() < 1e-3);
        assert!((f.values[idx("n_files_log")] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn metadata_only_diff_rejected() {
        let mut d = diff("m", 10, "x", false, vec![]);
        d.metadata_only = true;
        let err = extract(&d, &HistoryIndex::new(10, &FeatureConfig::default())).unwrap_err();
        assert!(err.to_string().contains("no file changes"));
    }

    #[test]
    fn as_of_must_equal_close_time() {
        let d = diff("a", 10, "x", false, vec![change("f.py", 1, 0, 1, false)]);
        assert!(extract(&d, &HistoryIndex::new(11, &FeatureConfig::default())).is_err());
    }

    #[test]
    fn past_sev_flips_only_prior_sev_flags() {
        let cfg = FeatureConfig::default();
        let base = vec![
            diff("p", 5, "bob", false, vec![change("d/f.py", 2, 0, 2, true)]),
            diff("q", 10, "bob", false, vec![change("d/f.py", 1, 1, 2, false)]),
        ];
        let target = diff("t", 20, "alice", false, vec![change("d/f.py", 1, 0, 3, false)]);

        let before = {
            let c = corpus([base.clone(), vec![target.clone()]].concat());
            extract(&target, &build_history(&c, 20, &cfg)).unwrap()
        };
        let mut with_sev = base.clone();
        with_sev[1].caused_sev = true;
        let after = {
            let c = corpus([with_sev, vec![target.clone()]].concat());
            extract(&target, &build_history(&c, 20, &cfg)).unwrap()
        };
        assert_eq!(before.values[idx("prior_sev_file")], 0.0);
        assert_eq!(after.values[idx("prior_sev_file")], 1.0);
        assert_eq!(after.values[idx("prior_sev_folder")], 1.0);
        for name in BASE_FEATURES.iter().filter(|n| !n.starts_with("prior_sev")) {
            assert_eq!(before.get(name), after.get(name), "{name} changed");
        }
    }

    #[test]
    fn creator_distinct_authors_and_critical() {
        let cfg = FeatureConfig {
            critical_prefixes: vec!["pay/".into()],
            ..FeatureConfig::default()
        };
        let c = corpus(vec![
            diff("a", 1, "alice", false, vec![change("pay/f.py", 2, 0, 2, true)]),
            diff("b", 2, "bob", false, vec![change("pay/f.py", 1, 0, 3, false)]),
            diff("c", 3, "bob", false, vec![change("pay/f.py", 1, 0, 4, false)]),
        ]);
        let target = diff("t", 4, "alice", false, vec![change("pay/f.py", 1, 0, 5, false)]);
        let f = extract(&target, &build_history(&c, 4, &cfg)).unwrap();
        assert_eq!(f.values[idx("author_is_creator")], 1.0);
        assert_eq!(f.values[idx("critical_service")], 1.0);
        assert!((f.values[idx("n_prior_authors_log")] - 3f64.ln()).abs() < 1e-12);
        assert!((f.values[idx("author_prior_diffs_log")] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn branch_line_complexity_accumulates() {
        let mut first = FileChange::new("f.py");
        first.added = vec!["if x:".into(), "y = 1".into(), "for i in z:".into()];
        first.file_size_after = 3;
        first.is_new_file = true;
        let mut second = FileChange::new("f.py");
        second.added = vec!["while True:".into()];
        second.deleted = vec!["if x:".into()];
        second.file_size_after = 3;
        let c = corpus(vec![diff("a", 1, "x", false, vec![first])]);
        let target = diff("t", 2, "x", false, vec![second]);
        let f = extract(&target, &build_history(&c, 2, &FeatureConfig::default())).unwrap();
        assert_eq!(f.values[idx("complexity_total")], 2.0);
        assert!(!is_branch_line("elif_count = 3"));
    }

    #[test]
    fn table_matches_per_diff_history() {
        let corpus = crate::corpus::generate_synthetic(&crate::corpus::SyntheticConfig {
            n: 300,
            seed: 9,
            sev_rate: 0.1,
            ..Default::default()
        })
        .unwrap();
        let cfg = FeatureConfig::default();
        let table = FeatureTable::build(&corpus, &cfg).unwrap();
        for r in corpus.records().iter().step_by(7) {
            let direct = extract(r, &build_history(&corpus, r.closed_at, &cfg)).unwrap();
            assert_eq!(table.get(&r.id), Some(&direct));
        }
    }

    #[test]
    fn count_logs_non_negative() {
        let corpus = crate::corpus::generate_synthetic(&crate::corpus::SyntheticConfig {
            n: 200,
            ..Default::default()
        })
        .unwrap();
        let table = FeatureTable::build(&corpus, &FeatureConfig::default()).unwrap();
        for r in corpus.records() {
            let f = table.get(&r.id).unwrap();
            for name in ["n_files_log", "n_prior_authors_log", "author_prior_diffs_log", "complexity_total"] {
                assert!(f.get(name).unwrap() >= 0.0);
            }
            assert!(f.values.iter().all(|v| v.is_finite()));
        }
    }
}
