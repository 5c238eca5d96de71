//! Diff corpus data model and ingestion.
//!
//! A corpus is an immutable, time-ordered list of [`DiffRecord`]s. Three
//! ingestion paths exist: canonical JSONL files ([`load_jsonl`]), version
//! control history ([`git::mine_git`]) and a seeded generator with planted
//! risk signal ([`synthetic::generate_synthetic`]).

pub mod git;
pub mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::unidiff::{Hunk, LineTag};

pub use git::mine_git;
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// One file touched by a diff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileChange {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old_path: Option<String>,
    #[serde(default)]
    pub added: Vec<String>,
    #[serde(default)]
    pub deleted: Vec<String>,
    /// Hunk structure when known (parsed diffs). Empty means the change is
    /// described only by its added/deleted lines.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hunks: Vec<Hunk>,
    #[serde(default)]
    pub is_new_file: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_deleted: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_binary: bool,
    /// File length in lines after the change.
    #[serde(default)]
    pub file_size_after: u64,
    #[serde(default = "other_language")]
    pub language: String,
}

fn other_language() -> String {
    OTHER_LANGUAGE.to_string()
}

impl FileChange {
    pub fn new(path: impl Into<String>) -> Self {
        let path = path.into();
        let language = language_for_path(&path).to_string();
        FileChange {
            path,
            old_path: None,
            added: Vec::new(),
            deleted: Vec::new(),
            hunks: Vec::new(),
            is_new_file: false,
            is_deleted: false,
            is_binary: false,
            file_size_after: 0,
            language,
        }
    }

    pub fn churn(&self) -> usize {
        if self.is_binary {
            0
        } else {
            self.added.len() + self.deleted.len()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.path.is_empty() {
            return Err("empty file path".into());
        }
        if self.is_new_file {
            if !self.deleted.is_empty() {
                return Err(format!("new file {} has deleted lines", self.path));
            }
            if self.old_path.is_some() {
                return Err(format!("new file {} has an old path", self.path));
            }
            if self.file_size_after < self.added.len() as u64 {
                return Err(format!(
                    "new file {} is smaller than its added lines",
                    self.path
                ));
            }
        }
        if self.is_new_file && self.is_deleted {
            return Err(format!("{} is both created and deleted", self.path));
        }
        if !self.hunks.is_empty() {
            let mut added = Vec::new();
            let mut deleted = Vec::new();
            for hunk in &self.hunks {
                hunk.check().map_err(|e| e.to_string())?;
                for line in &hunk.lines {
                    match line.tag {
                        LineTag::Add => added.push(&line.text),
                        LineTag::Del => deleted.push(&line.text),
                        LineTag::Context => {}
                    }
                }
            }
            if !added.iter().copied().eq(self.added.iter())
                || !deleted.iter().copied().eq(self.deleted.iter())
            {
                return Err(format!(
                    "{}: hunks disagree with added/deleted lines",
                    self.path
                ));
            }
        }
        Ok(())
    }
}

/// One landed code change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRecord {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub test_plan: String,
    pub author_id: String,
    /// Close (land) time, UTC seconds.
    pub closed_at: i64,
    pub org: String,
    #[serde(default)]
    pub changes: Vec<FileChange>,
    #[serde(default)]
    pub caused_sev: bool,
    /// Set for records that carry only metadata (e.g. merge commits).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub metadata_only: bool,
}

impl DiffRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::InvalidRecord {
            id: self.id.clone(),
            message,
        };
        if self.id.is_empty() {
            return Err(bad("empty id".into()));
        }
        if self.closed_at <= 0 {
            return Err(bad(format!("closed_at must be positive, got {}", self.closed_at)));
        }
        if self.changes.is_empty() && !self.metadata_only {
            return Err(bad("no file changes and not flagged metadata-only".into()));
        }
        for change in &self.changes {
            change.validate().map_err(bad)?;
        }
        Ok(())
    }

    pub fn churn(&self) -> usize {
        self.changes.iter().map(FileChange::churn).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Jsonl,
    Git,
    Synthetic,
}

/// An ordered diff corpus. Sorted ascending by `closed_at` (ties by id).
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    records: Vec<DiffRecord>,
    provenance: Provenance,
    generator_truth: Option<BTreeMap<String, f64>>,
}

impl Corpus {
    /// Builds a corpus, validating every record and establishing sort order.
    pub fn new(
        mut records: Vec<DiffRecord>,
        provenance: Provenance,
        generator_truth: Option<BTreeMap<String, f64>>,
    ) -> Result<Self> {
        if generator_truth.is_some() != (provenance == Provenance::Synthetic) {
            return Err(Error::InvalidArgument(
                "generator truth must be present exactly for synthetic corpora".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        if let Some(truth) = &generator_truth {
            for r in &records {
                if !truth.contains_key(&r.id) {
                    return Err(Error::InvalidRecord {
                        id: r.id.clone(),
                        message: "missing generator truth".into(),
                    });
                }
            }
        }
        records.sort_by(|a, b| a.closed_at.cmp(&b.closed_at).then_with(|| a.id.cmp(&b.id)));
        Ok(Corpus {
            records,
            provenance,
            generator_truth,
        })
    }

    pub fn empty(provenance: Provenance) -> Self {
        let truth = (provenance == Provenance::Synthetic).then(BTreeMap::new);
        Corpus {
            records: Vec::new(),
            provenance,
            generator_truth: truth,
        }
    }

    pub fn records(&self) -> &[DiffRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<DiffRecord> {
        self.records
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn generator_truth(&self) -> Option<&BTreeMap<String, f64>> {
        self.generator_truth.as_ref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DiffRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Sub-corpus of the records accepted by `keep`, preserving order,
    /// provenance and the matching slice of generator truth.
    pub fn filter(&self, mut keep: impl FnMut(&DiffRecord) -> bool) -> Corpus {
        let records: Vec<DiffRecord> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let generator_truth = self.generator_truth.as_ref().map(|truth| {
            records
                .iter()
                .filter_map(|r| truth.get(&r.id).map(|&v| (r.id.clone(), v)))
                .collect()
        });
        Corpus {
            records,
            provenance: self.provenance,
            generator_truth,
        }
    }

    pub fn sev_count(&self) -> usize {
        self.records.iter().filter(|r| r.caused_sev).count()
    }
}

/// Fraction of SEV-causing records.
pub fn sev_rate(corpus: &Corpus) -> Result<f64> {
    sev_rate_from_counts(corpus.sev_count(), corpus.len())
}

pub fn sev_rate_from_counts(positives: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::EmptyInput("corpus has no records"));
    }
    if positives > total {
        return Err(Error::InvalidArgument(format!(
            "{positives} positives exceed {total} records"
        )));
    }
    Ok(positives as f64 / total as f64)
}

const FORMAT_TAG: &str = "diffrisk-corpus";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Line {
    #[serde(flatten)]
    record: DiffRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    true_risk: Option<f64>,
}

/// Reads a corpus from JSONL: one [`DiffRecord`] object per line. An optional
/// first-line header (`{"format":"diffrisk-corpus",...}`) carries provenance;
/// headerless files are treated as plain JSONL corpora.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_jsonl(reader: impl BufRead) -> Result<Corpus> {
    let mut provenance = Provenance::Jsonl;
    let mut records = Vec::new();
    let mut truth = BTreeMap::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 && line.contains("\"format\"") {
            let header: Header = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
            if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
                return Err(Error::MalformedLine {
                    line: line_no,
                    message: format!(
                        "unsupported corpus format {} v{}",
                        header.format, header.version
                    ),
                });
            }
            provenance = header.provenance;
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(parsed.record.id.clone()) {
            return Err(Error::DuplicateId(parsed.record.id));
        }
        if let Some(risk) = parsed.true_risk {
            truth.insert(parsed.record.id.clone(), risk);
        }
        parsed.record.validate().map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        records.push(parsed.record);
    }
    let generator_truth = match provenance {
        Provenance::Synthetic => Some(truth),
        _ if truth.is_empty() => None,
        _ => {
            return Err(Error::InvalidArgument(
                "true_risk values present in a non-synthetic corpus".into(),
            ))
        }
    };
    Corpus::new(records, provenance, generator_truth)
}

/// Writes the canonical JSONL form: header line, then one record per line.
pub fn save_jsonl(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl(corpus, &mut w).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_jsonl(corpus: &Corpus, mut w: impl Write) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        provenance: corpus.provenance,
    };
    let io = |e| Error::io("<corpus>", e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for record in &corpus.records {
        let line = Line {
            record: record.clone(),
            true_risk: corpus
                .generator_truth
                .as_ref()
                .and_then(|t| t.get(&record.id).copied()),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}

pub const OTHER_LANGUAGE: &str = "other";

/// Languages indicated by the seven per-language features when no config
/// overrides them.
pub const DEFAULT_LANGUAGES: [&str; 7] =
    ["python", "cpp", "java", "javascript", "hack", "kotlin", "rust"];

/// Maps a path to a language name by file extension.
pub fn language_for_path(path: &str) -> &'static str {
    let file = path.rsplit('/').next().unwrap_or(path);
    let ext = match file.rsplit_once('.') {
        Some((stem, ext)) if !stem.is_empty() => ext.to_ascii_lowercase(),
        _ => return OTHER_LANGUAGE,
    };
    match ext.as_str() {
        "py" | "pyi" => "python",
        "cc" | "cpp" | "cxx" | "hpp" | "hh" | "h" | "hxx" => "cpp",
        "c" => "c",
        "java" => "java",
        "js" | "jsx" | "mjs" | "cjs" => "javascript",
        "ts" | "tsx" => "typescript",
        "php" | "hack" | "hck" => "hack",
        "kt" | "kts" => "kotlin",
        "rs" => "rust",
        "go" => "go",
        "swift" => "swift",
        "m" | "mm" => "objc",
        "rb" => "ruby",
        "sh" | "bash" => "shell",
        _ => OTHER_LANGUAGE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(id: &str, closed_at: i64, sev: bool) -> DiffRecord {
        let mut change = FileChange::new("orgA/src/lib.py");
        change.added = vec!["x = 1".into()];
        change.file_size_after = 10;
        DiffRecord {
            id: id.into(),
            title: format!("change {id}"),
            test_plan: String::new(),
            author_id: "alice".into(),
            closed_at,
            org: "orgA".into(),
            changes: vec![change],
            caused_sev: sev,
            metadata_only: false,
        }
    }

    fn to_jsonl_lines(records: &[DiffRecord]) -> String {
        records
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect()
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        let corpus = read_jsonl("".as_bytes()).unwrap();
        assert!(corpus.is_empty());
        assert_eq!(corpus.provenance(), Provenance::Jsonl);
    }

    #[test]
    fn load_sorts_by_closed_at() {
        let text = to_jsonl_lines(&[record("b", 30, false), record("a", 10, true), record("c", 20, false)]);
        let corpus = read_jsonl(text.as_bytes()).unwrap();
        let ids: Vec<_> = corpus.records().iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "c", "b"]);
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let text = to_jsonl_lines(&[record("a", 10, false), record("a", 20, false)]);
        let err = read_jsonl(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("duplicate id"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut text = to_jsonl_lines(&[record("a", 10, false)]);
        text.push_str("{not json\n");
        match read_jsonl(text.as_bytes()).unwrap_err() {
            Error::MalformedLine { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn invalid_timestamp_and_missing_changes_rejected() {
        let mut r = record("a", 0, false);
        assert!(r.validate().is_err());
        r.closed_at = 5;
        r.changes.clear();
        assert!(r.validate().is_err());
        r.metadata_only = true;
        assert!(r.validate().is_ok());
    }

    #[test]
    fn new_file_invariants() {
        let mut c = FileChange::new("a.py");
        c.is_new_file = true;
        c.added = vec!["a".into(), "b".into()];
        c.file_size_after = 1;
        assert!(c.validate().is_err());
        c.file_size_after = 2;
        assert!(c.validate().is_ok());
        c.deleted = vec!["z".into()];
        assert!(c.validate().is_err());
    }

    #[test]
    fn sev_rate_all_positive() {
        let corpus = Corpus::new(
            vec![record("a", 1, true), record("b", 2, true)],
            Provenance::Jsonl,
            None,
        )
        .unwrap();
        assert_eq!(sev_rate(&corpus).unwrap(), 1.0);
        assert!(sev_rate(&Corpus::empty(Provenance::Jsonl)).is_err());
    }

    #[test]
    fn sev_rate_matches_published_split_rates() {
        let train = sev_rate_from_counts(1981, 855_282).unwrap();
        let val = sev_rate_from_counts(214, 120_967).unwrap();
        assert_eq!(format!("{:.2}%", train * 100.0), "0.23%");
        assert_eq!(format!("{:.2}%", val * 100.0), "0.18%");
    }

    #[test]
    fn header_round_trip_keeps_provenance() {
        let corpus = Corpus::new(vec![record("a", 1, false)], Provenance::Git, None).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&corpus, &mut buf).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn languages_from_extensions() {
        assert_eq!(language_for_path("a/b/c.py"), "python");
        assert_eq!(language_for_path("x.CPP"), "cpp");
        assert_eq!(language_for_path("Makefile"), OTHER_LANGUAGE);
        assert_eq!(language_for_path("dir.d/.bashrc"), OTHER_LANGUAGE);
    }
}
