//! Parsing and rendering of unified ("unidiff") patches.
//!
//! Accepts plain `diff -u` output as well as git's extended headers
//! (`diff --git`, `new file mode`, `rename from`, `Binary files ... differ`).
//! Rendering always emits the git flavour with explicit hunk lengths.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{language_for_path, FileChange};
use crate::error::{Error, Result};

const DEV_NULL: &str = "/dev/null";
const NO_NEWLINE: &str = "\\ No newline at end of file";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineTag {
    Context,
    Add,
    Del,
}

impl LineTag {
    fn prefix(self) -> char {
        match self {
            LineTag::Context => ' ',
            LineTag::Add => '+',
            LineTag::Del => '-',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HunkLine {
    pub tag: LineTag,
    pub text: String,
}

impl HunkLine {
    pub fn new(tag: LineTag, text: impl Into<String>) -> Self {
        HunkLine {
            tag,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hunk {
    pub old_start: u64,
    pub old_len: u64,
    pub new_start: u64,
    pub new_len: u64,
    /// Text after the closing `@@`, usually a function signature.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub section: String,
    pub lines: Vec<HunkLine>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub old_missing_newline: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub new_missing_newline: bool,
}

impl Hunk {
    /// A hunk with lengths computed from `lines`.
    pub fn from_lines(old_start: u64, new_start: u64, lines: Vec<HunkLine>) -> Self {
        let (old_len, new_len) = side_lengths(&lines);
        Hunk {
            old_start,
            old_len,
            new_start,
            new_len,
            section: String::new(),
            lines,
            old_missing_newline: false,
            new_missing_newline: false,
        }
    }

    /// Checks `count(add)+count(context) = new_len` and
    /// `count(del)+count(context) = old_len`.
    pub fn check(&self) -> Result<()> {
        let (old_len, new_len) = side_lengths(&self.lines);
        if old_len != self.old_len || new_len != self.new_len {
            return Err(Error::HunkInvariant(format!(
                "header says -{},{} +{},{} but body has {} old and {} new lines",
                self.old_start, self.old_len, self.new_start, self.new_len, old_len, new_len
            )));
        }
        if self.old_missing_newline && old_len == 0 || self.new_missing_newline && new_len == 0 {
            return Err(Error::HunkInvariant(
                "missing-newline flag on an empty side".into(),
            ));
        }
        Ok(())
    }
}

fn side_lengths(lines: &[HunkLine]) -> (u64, u64) {
    let mut old = 0;
    let mut new = 0;
    for line in lines {
        match line.tag {
            LineTag::Context => {
                old += 1;
                new += 1;
            }
            LineTag::Del => old += 1,
            LineTag::Add => new += 1,
        }
    }
    (old, new)
}

/// Single hunk equivalent to a change described only by added/deleted lines.
pub fn synthesize_hunk(change: &FileChange) -> Option<Hunk> {
    if change.added.is_empty() && change.deleted.is_empty() {
        return None;
    }
    let lines = change
        .deleted
        .iter()
        .map(|t| HunkLine::new(LineTag::Del, t.clone()))
        .chain(change.added.iter().map(|t| HunkLine::new(LineTag::Add, t.clone())))
        .collect();
    let old_start = u64::from(!change.deleted.is_empty());
    let new_start = u64::from(!change.added.is_empty());
    Some(Hunk::from_lines(old_start, new_start, lines))
}

struct Lines<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Lines<'a> {
    /// Returns the next line without its `\n` and the byte offset it starts at.
    fn peek(&self) -> Option<(&'a str, usize)> {
        if self.pos >= self.text.len() {
            return None;
        }
        let rest = &self.text[self.pos..];
        let line = rest.split('\n').next().unwrap_or(rest);
        Some((line, self.pos))
    }

    fn advance(&mut self) {
        if let Some((line, _)) = self.peek() {
            self.pos += line.len() + 1;
        }
    }

    fn next_line(&mut self) -> Option<(&'a str, usize)> {
        let item = self.peek();
        self.advance();
        item
    }
}

#[derive(Default)]
struct Pending {
    old: Option<String>,
    new: Option<String>,
    new_file: bool,
    deleted_file: bool,
    binary: bool,
    saw_file_headers: bool,
    hunks: Vec<Hunk>,
}

impl Pending {
    fn finish(self, offset: usize) -> Result<FileChange> {
        let old = self.old.filter(|p| p != DEV_NULL);
        let new = self.new.filter(|p| p != DEV_NULL);
        let new_file = self.new_file || (self.saw_file_headers && old.is_none());
        let deleted = self.deleted_file || (self.saw_file_headers && new.is_none());
        let path = if deleted { old.clone() } else { new.clone().or(old.clone()) };
        let path = path.ok_or(Error::DiffParse {
            offset,
            message: "file header names no path".into(),
        })?;
        let mut change = FileChange::new(path.clone());
        change.language = language_for_path(&path).to_string();
        change.is_new_file = new_file;
        change.is_deleted = deleted;
        change.is_binary = self.binary;
        if !new_file && !deleted {
            change.old_path = old.filter(|o| *o != path);
        }
        for hunk in &self.hunks {
            for line in &hunk.lines {
                match line.tag {
                    LineTag::Add => change.added.push(line.text.clone()),
                    LineTag::Del => change.deleted.push(line.text.clone()),
                    LineTag::Context => {}
                }
            }
        }
        change.hunks = self.hunks;
        if new_file {
            change.file_size_after = change.added.len() as u64;
        }
        Ok(change)
    }
}

fn strip_side(raw: &str, prefix: &str) -> String {
    let raw = raw.split('\t').next().unwrap_or(raw);
    let raw = raw.strip_suffix('\r').unwrap_or(raw);
    if raw == DEV_NULL {
        return DEV_NULL.to_string();
    }
    raw.strip_prefix(prefix).unwrap_or(raw).to_string()
}

fn git_header_paths(rest: &str) -> (Option<String>, Option<String>) {
    let len = rest.len();
    if len >= 5 && (len - 1) % 2 == 0 {
        let mid = (len - 1) / 2;
        if rest.is_char_boundary(mid) && rest.is_char_boundary(mid + 1) {
            let (a, b) = (&rest[..mid], &rest[mid + 1..]);
            if let (Some(a), Some(b)) = (a.strip_prefix("a/"), b.strip_prefix("b/")) {
                if a == b {
                    return (Some(a.to_string()), Some(b.to_string()));
                }
            }
        }
    }
    match rest.find(" b/") {
        Some(i) => (
            Some(strip_side(&rest[..i], "a/")),
            Some(strip_side(&rest[i + 1..], "b/")),
        ),
        None => (None, None),
    }
}

fn parse_range(s: &str) -> Option<(u64, u64)> {
    match s.split_once(',') {
        Some((start, len)) => Some((start.parse().ok()?, len.parse().ok()?)),
        None => Some((s.parse().ok()?, 1)),
    }
}

fn parse_hunk_header(line: &str) -> Option<(u64, u64, u64, u64, String)> {
    let rest = line.strip_prefix("@@ -")?;
    let (old, rest) = rest.split_once(" +")?;
    let (new, rest) = rest.split_once(" @@")?;
    let (old_start, old_len) = parse_range(old)?;
    let (new_start, new_len) = parse_range(new)?;
    let section = rest.strip_prefix(' ').unwrap_or(rest).to_string();
    Some((old_start, old_len, new_start, new_len, section))
}

fn parse_hunk(lines: &mut Lines<'_>, header: &str, offset: usize) -> Result<Hunk> {
    let (old_start, old_len, new_start, new_len, section) =
        parse_hunk_header(header).ok_or_else(|| Error::DiffParse {
            offset,
            message: format!("malformed hunk header {header:?}"),
        })?;
    let mut hunk = Hunk {
        old_start,
        old_len,
        new_start,
        new_len,
        section,
        lines: Vec::new(),
        old_missing_newline: false,
        new_missing_newline: false,
    };
    let (mut old_left, mut new_left) = (old_len, new_len);
    let mismatch = |offset: usize, what: &str| Error::DiffParse {
        offset,
        message: format!(
            "hunk length mismatch: {what} (header -{old_start},{old_len} +{new_start},{new_len})"
        ),
    };
    while old_left > 0 || new_left > 0 {
        let (line, at) = lines
            .next_line()
            .ok_or_else(|| mismatch(lines.text.len(), "unexpected end of input"))?;
        let (tag, text) = match line.chars().next() {
            None => (LineTag::Context, ""),
            Some(' ') => (LineTag::Context, &line[1..]),
            Some('+') => (LineTag::Add, &line[1..]),
            Some('-') => (LineTag::Del, &line[1..]),
            Some('\\') => {
                mark_missing_newline(&mut hunk);
                continue;
            }
            Some(_) => return Err(mismatch(at, "body ended early")),
        };
        let (needs_old, needs_new) = match tag {
            LineTag::Context => (true, true),
            LineTag::Del => (true, false),
            LineTag::Add => (false, true),
        };
        if needs_old && old_left == 0 || needs_new && new_left == 0 {
            return Err(mismatch(at, "body longer than header"));
        }
        old_left -= u64::from(needs_old);
        new_left -= u64::from(needs_new);
        hunk.lines.push(HunkLine::new(tag, text));
    }
    while let Some((line, _)) = lines.peek() {
        if line.starts_with('\\') {
            mark_missing_newline(&mut hunk);
            lines.advance();
        } else {
            break;
        }
    }
    Ok(hunk)
}

fn mark_missing_newline(hunk: &mut Hunk) {
    match hunk.lines.last().map(|l| l.tag) {
        Some(LineTag::Context) => {
            hunk.old_missing_newline = true;
            hunk.new_missing_newline = true;
        }
        Some(LineTag::Del) => hunk.old_missing_newline = true,
        Some(LineTag::Add) => hunk.new_missing_newline = true,
        None => {}
    }
}

/// Parses unified diff text into one [`FileChange`] per file section.
///
/// `--- /dev/null` marks a created file and `+++ /dev/null` a deletion.
/// Lines outside any file section (e.g. a commit preamble) are skipped.
/// Sizes of modified files are unknown from a patch alone and left at 0.
pub fn parse_unidiff(text: &str) -> Result<Vec<FileChange>> {
    let mut lines = Lines { text, pos: 0 };
    let mut out = Vec::new();
    let mut current: Option<(Pending, usize)> = None;

    while let Some((line, offset)) = lines.peek() {
        if let Some(rest) = line.strip_prefix("diff --git ") {
            if let Some((p, at)) = current.take() {
                out.push(p.finish(at)?);
            }
            let (old, new) = git_header_paths(rest.strip_suffix('\r').unwrap_or(rest));
            current = Some((
                Pending {
                    old,
                    new,
                    ..Pending::default()
                },
                offset,
            ));
            lines.advance();
            continue;
        }
        if line.starts_with("--- ") {
            let mut probe = Lines {
                text,
                pos: lines.pos,
            };
            probe.advance();
            if let Some((next, _)) = probe.peek() {
                if let Some(new_raw) = next.strip_prefix("+++ ") {
                    let reuse = matches!(&current, Some((p, _)) if !p.saw_file_headers && p.hunks.is_empty());
                    if !reuse {
                        if let Some((p, at)) = current.take() {
                            out.push(p.finish(at)?);
                        }
                        current = Some((Pending::default(), offset));
                    }
                    let (p, _) = current.as_mut().expect("pending file");
                    p.old = Some(strip_side(&line[4..], "a/"));
                    p.new = Some(strip_side(new_raw, "b/"));
                    p.saw_file_headers = true;
                    lines.advance();
                    lines.advance();
                    continue;
                }
            }
        }
        if line.starts_with("@@") {
            let Some((p, _)) = current.as_mut() else {
                return Err(Error::DiffParse {
                    offset,
                    message: "hunk outside of a file section".into(),
                });
            };
            lines.advance();
            let hunk = parse_hunk(&mut lines, line, offset)?;
            p.hunks.push(hunk);
            continue;
        }
        if let Some((p, _)) = current.as_mut() {
            if p.hunks.is_empty() {
                if line.starts_with("new file mode") {
                    p.new_file = true;
                } else if line.starts_with("deleted file mode") {
                    p.deleted_file = true;
                } else if let Some(from) = line.strip_prefix("rename from ") {
                    p.old = Some(from.to_string());
                } else if let Some(to) = line.strip_prefix("rename to ") {
                    p.new = Some(to.to_string());
                } else if line.starts_with("Binary files ") || line.starts_with("GIT binary patch") {
                    p.binary = true;
                }
            }
        }
        lines.advance();
    }
    if let Some((p, at)) = current.take() {
        out.push(p.finish(at)?);
    }
    Ok(out)
}

/// Renders changes as git-style unified diff text. Inverse of
/// [`parse_unidiff`] on the patch structure.
pub fn render_unidiff(changes: &[FileChange]) -> Result<String> {
    let mut out = String::new();
    for change in changes {
        render_change(change, &mut out)?;
    }
    Ok(out)
}

fn render_change(change: &FileChange, out: &mut String) -> Result<()> {
    change.validate().map_err(Error::HunkInvariant)?;
    let old = change.old_path.as_deref().unwrap_or(&change.path);
    let new = change.path.as_str();
    let _ = writeln!(out, "diff --git a/{old} b/{new}");
    if change.is_new_file {
        out.push_str("new file mode 100644\n");
    }
    if change.is_deleted {
        out.push_str("deleted file mode 100644\n");
    }
    if old != new {
        let _ = writeln!(out, "rename from {old}\nrename to {new}");
    }
    let old_side = if change.is_new_file {
        DEV_NULL.to_string()
    } else {
        format!("a/{old}")
    };
    let new_side = if change.is_deleted {
        DEV_NULL.to_string()
    } else {
        format!("b/{new}")
    };
    if change.is_binary {
        let _ = writeln!(out, "Binary files {old_side} and {new_side} differ");
        return Ok(());
    }
    let synthesized;
    let hunks: &[Hunk] = if change.hunks.is_empty() {
        synthesized = synthesize_hunk(change);
        synthesized.as_slice()
    } else {
        &change.hunks
    };
    if hunks.is_empty() {
        return Ok(());
    }
    let _ = writeln!(out, "--- {old_side}\n+++ {new_side}");
    for hunk in hunks {
        hunk.check()?;
        render_hunk(hunk, out);
    }
    Ok(())
}

fn render_hunk(hunk: &Hunk, out: &mut String) {
    let _ = write!(
        out,
        "@@ -{},{} +{},{} @@",
        hunk.old_start, hunk.old_len, hunk.new_start, hunk.new_len
    );
    if !hunk.section.is_empty() {
        out.push(' ');
        out.push_str(&hunk.section);
    }
    out.push('\n');
    let last_old = hunk.lines.iter().rposition(|l| l.tag != LineTag::Add);
    let last_new = hunk.lines.iter().rposition(|l| l.tag != LineTag::Del);
    for (i, line) in hunk.lines.iter().enumerate() {
        out.push(line.tag.prefix());
        out.push_str(&line.text);
        out.push('\n');
        let old_eof = hunk.old_missing_newline && Some(i) == last_old;
        let new_eof = hunk.new_missing_newline && Some(i) == last_new;
        if old_eof || new_eof {
            out.push_str(NO_NEWLINE);
            out.push('\n');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input() {
        assert!(parse_unidiff("").unwrap().is_empty());
        assert_eq!(render_unidiff(&[]).unwrap(), "");
    }

    #[test]
    fn new_file_with_two_lines() {
        let text = "--- /dev/null\n+++ b/src/new.py\n@@ -0,0 +1,2 @@\n+a = 1\n+b = 2\n";
        let changes = parse_unidiff(text).unwrap();
        assert_eq!(changes.len(), 1);
        let c = &changes[0];
        assert!(c.is_new_file);
        assert_eq!(c.path, "src/new.py");
        assert_eq!(c.added, ["a = 1", "b = 2"]);
        assert_eq!(c.file_size_after, 2);
        assert_eq!(c.language, "python");
    }

    #[test]
    fn deletion_via_dev_null_target() {
        let text = "--- a/old.rs\n+++ /dev/null\n@@ -1,1 +0,0 @@\n-fn main() {}\n";
        let c = &parse_unidiff(text).unwrap()[0];
        assert!(c.is_deleted);
        assert_eq!(c.path, "old.rs");
        assert_eq!(c.deleted, ["fn main() {}"]);
    }

    #[test]
    fn rendered_new_file_uses_dev_null() {
        let mut c = FileChange::new("x.py");
        c.is_new_file = true;
        c.added = vec!["print(1)".into()];
        c.file_size_after = 1;
        let text = render_unidiff(&[c.clone()]).unwrap();
        assert!(text.contains("--- /dev/null\n"), "{text}");
        assert_eq!(
            text,
            "diff --git a/x.py b/x.py\nnew file mode 100644\n--- /dev/null\n+++ b/x.py\n@@ -0,0 +1,1 @@\n+print(1)\n"
        );
    }

    #[test]
    fn malformed_header_reports_offset() {
        let text = "--- a/x\n+++ b/x\n@@ -a +1 @@\n+x\n";
        match parse_unidiff(text).unwrap_err() {
            Error::DiffParse { offset, message } => {
                assert_eq!(offset, 16);
                assert!(message.contains("malformed hunk header"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let short = "--- a/x\n+++ b/x\n@@ -1,2 +1,2 @@\n a\n";
        assert!(matches!(parse_unidiff(short), Err(Error::DiffParse { .. })));
        let garbage = "--- a/x\n+++ b/x\n@@ -1,2 +1,2 @@\n a\nzzz\n";
        let err = parse_unidiff(garbage).unwrap_err().to_string();
        assert!(err.contains("mismatch"), "{err}");
    }

    #[test]
    fn omitted_lengths_default_to_one() {
        let text = "--- a/x\n+++ b/x\n@@ -3 +3 @@ fn f()\n-old\n+new\n";
        let c = &parse_unidiff(text).unwrap()[0];
        let h = &c.hunks[0];
        assert_eq!((h.old_start, h.old_len, h.new_start, h.new_len), (3, 1, 3, 1));
        assert_eq!(h.section, "fn f()");
    }

    #[test]
    fn no_newline_marker_sets_flags() {
        let text = "--- a/x\n+++ b/x\n@@ -1 +1 @@\n-old\n\\ No newline at end of file\n+new\n\\ No newline at end of file\n";
        let c = &parse_unidiff(text).unwrap()[0];
        assert!(c.hunks[0].old_missing_newline && c.hunks[0].new_missing_newline);
        let rendered = render_unidiff(&parse_unidiff(text).unwrap()).unwrap();
        assert!(rendered.ends_with("-old\n\\ No newline at end of file\n+new\n\\ No newline at end of file\n"));
    }

    #[test]
    fn git_extended_headers() {
        let text = "\
diff --git a/img.png b/img.png
new file mode 100644
index 0000000..e69de29
Binary files /dev/null and b/img.png differ
diff --git a/old name.txt b/new name.txt
similarity index 100%
rename from old name.txt
rename to new name.txt
diff --git a/keep.py b/keep.py
index 1111111..2222222 100644
--- a/keep.py
+++ b/keep.py
@@ -1,3 +1,3 @@ def f():
 a
-b
+c
 d
";
        let changes = parse_unidiff(text).unwrap();
        assert_eq!(changes.len(), 3);
        assert!(changes[0].is_binary && changes[0].is_new_file);
        assert_eq!(changes[0].churn(), 0);
        assert_eq!(changes[1].old_path.as_deref(), Some("old name.txt"));
        assert_eq!(changes[1].path, "new name.txt");
        assert!(changes[1].hunks.is_empty());
        assert_eq!(changes[2].added, ["c"]);
        assert_eq!(changes[2].deleted, ["b"]);
        assert_eq!(changes[2].hunks[0].lines.len(), 4);

        let again = parse_unidiff(&render_unidiff(&changes).unwrap()).unwrap();
        assert_eq!(again, changes);
    }

    #[test]
    fn render_rejects_inconsistent_hunk() {
        let mut c = FileChange::new("x.py");
        c.added = vec!["a".into()];
        let mut hunk = Hunk::from_lines(1, 1, vec![HunkLine::new(LineTag::Add, "a")]);
        hunk.new_len = 3;
        c.hunks = vec![hunk];
        assert!(matches!(render_unidiff(&[c]), Err(Error::HunkInvariant(_))));
    }

    #[test]
    fn preamble_lines_are_skipped() {
        let text = "commit abc\nAuthor: x\n\n    message\n\n--- a/f\n+++ b/f\n@@ -1 +1 @@\n-x\n+y\n";
        assert_eq!(parse_unidiff(text).unwrap().len(), 1);
    }
}
