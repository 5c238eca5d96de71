//! Corpus ingestion from git history via the `git` command-line tool.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};

use log::warn;

use super::{Corpus, DiffRecord, Provenance};
use crate::error::{Error, Result};
use crate::unidiff::parse_unidiff;

/// Org assigned to commits whose paths match no configured prefix.
pub const UNSCOPED_ORG: &str = "unscoped";

const FIELD_SEP: char = '\u{1f}';
const RECORD_SEP: char = '\0';

/// One `<hash> <0|1>` entry per line; `#` starts a comment.
pub fn read_sev_labels(path: &Path) -> Result<Vec<(String, bool)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(hash), Some(flag), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::MalformedLine {
                line: idx + 1,
                message: format!("expected `<hash> <0|1>`, got {line:?}"),
            });
        };
        let flag = match flag {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::MalformedLine {
                    line: idx + 1,
                    message: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        labels.push((hash.to_ascii_lowercase(), flag));
    }
    Ok(labels)
}

/// Org of the longest configured prefix matching any touched path.
pub fn org_for_paths<'a>(
    paths: impl IntoIterator<Item = &'a str>,
    org_map: &BTreeMap<String, String>,
) -> String {
    let mut best: Option<(&str, &str)> = None;
    for path in paths {
        for (prefix, org) in org_map {
            if path.starts_with(prefix.as_str())
                && best.is_none_or(|(p, _)| prefix.len() > p.len())
            {
                best = Some((prefix, org));
            }
        }
    }
    best.map_or_else(|| UNSCOPED_ORG.to_string(), |(_, org)| org.to_string())
}

fn git(repo: &Path) -> Command {
    let mut cmd = Command::new("git");
    cmd.arg("-C")
        .arg(repo)
        .args(["-c", "core.quotepath=off", "-c", "color.ui=never"]);
    cmd
}

fn run(mut cmd: Command) -> Result<String> {
    let out = cmd
        .output()
        .map_err(|e| Error::Git(format!("cannot run git: {e}")))?;
    if !out.status.success() {
        return Err(Error::Git(
            String::from_utf8_lossy(&out.stderr).trim().to_string(),
        ));
    }
    // Patches of non-UTF-8 text files are kept with replacement characters;
    // line structure, and so churn, is unaffected.
    Ok(match String::from_utf8(out.stdout) {
        Ok(s) => s,
        Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
    })
}

/// Value of a `Test-Plan:` trailer, including indented continuation lines.
pub fn test_plan_trailer(body: &str) -> String {
    let mut lines = body.lines();
    while let Some(line) = lines.next() {
        let lower = line.to_ascii_lowercase();
        let rest = lower
            .strip_prefix("test-plan:")
            .or_else(|| lower.strip_prefix("test plan:"));
        if let Some(rest) = rest {
            let start = line.len() - rest.len();
            let mut plan = vec![line[start..].trim().to_string()];
            for cont in lines.by_ref() {
                if cont.starts_with([' ', '\t']) && !cont.trim().is_empty() {
                    plan.push(cont.trim().to_string());
                } else {
                    break;
                }
            }
            return plan
                .into_iter()
                .filter(|l| !l.is_empty())
                .collect::<Vec<_>>()
                .join("\n");
        }
    }
    String::new()
}

fn count_lines(content: &[u8]) -> u64 {
    let newlines = content.iter().filter(|&&b| b == b'\n').count() as u64;
    match content.last() {
        Some(b'\n') | None => newlines,
        Some(_) => newlines + 1,
    }
}

/// Line counts of `rev:path` objects, fetched through one `git cat-file --batch`.
fn blob_line_counts(repo: &Path, requests: &[String]) -> Result<Vec<Option<u64>>> {
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let mut cmd = git(repo);
    cmd.args(["cat-file", "--batch"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null());
    let mut child = cmd
        .spawn()
        .map_err(|e| Error::Git(format!("cannot run git cat-file: {e}")))?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let input: String = requests.iter().map(|r| format!("{r}\n")).collect();
    let writer = std::thread::spawn(move || stdin.write_all(input.as_bytes()));
    let mut output = Vec::new();
    child
        .stdout
        .take()
        .expect("piped stdout")
        .read_to_end(&mut output)
        .map_err(|e| Error::Git(e.to_string()))?;
    writer
        .join()
        .expect("writer thread")
        .map_err(|e| Error::Git(e.to_string()))?;
    child.wait().map_err(|e| Error::Git(e.to_string()))?;

    let mut counts = Vec::with_capacity(requests.len());
    let mut pos = 0;
    for _ in requests {
        let end = output[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Git("truncated cat-file output".into()))?;
        let header = String::from_utf8_lossy(&output[pos..pos + end]).to_string();
        pos += end + 1;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.last() == Some(&"missing") || fields.len() < 3 {
            counts.push(None);
            continue;
        }
        let size: usize = fields[2]
            .parse()
            .map_err(|_| Error::Git(format!("bad cat-file header {header:?}")))?;
        let content = &output[pos..pos + size];
        counts.push(Some(count_lines(content)));
        pos += size + 1;
    }
    Ok(counts)
}

/// Mines one [`DiffRecord`] per commit reachable from `HEAD`.
///
/// Title is the commit subject, the test plan comes from a `Test-Plan:`
/// trailer, `closed_at` is the committer timestamp and `author_id` the
/// author email. Merge commits become metadata-only records. Labels naming
/// an unknown commit are logged and ignored.
pub fn mine_git(
    repo_path: impl AsRef<Path>,
    sev_labels_path: Option<&Path>,
    org_map: &BTreeMap<String, String>,
) -> Result<Corpus> {
    let repo = repo_path.as_ref();
    let labels = match sev_labels_path {
        Some(p) => read_sev_labels(p)?,
        None => Vec::new(),
    };

    let mut cmd = git(repo);
    cmd.args([
        "log",
        "--reverse",
        "--no-ext-diff",
        "-M",
        "-p",
        "--format=%x00%H%x1f%an%x1f%ae%x1f%ct%x1f%B%x1f",
        "HEAD",
    ]);
    let log = run(cmd)?;

    let mut records = Vec::new();
    for chunk in log.split(RECORD_SEP).filter(|c| !c.is_empty()) {
        let fields: Vec<&str> = chunk.splitn(6, FIELD_SEP).collect();
        let [hash, name, email, ct, body, patch] = fields[..] else {
            return Err(Error::Git(format!("unexpected log record {:?}", &chunk[..chunk.len().min(80)])));
        };
        let closed_at: i64 = ct
            .trim()
            .parse()
            .map_err(|_| Error::Git(format!("bad commit time {ct:?} for {hash}")))?;
        let changes = parse_unidiff(patch)?;
        let org = org_for_paths(changes.iter().map(|c| c.path.as_str()), org_map);
        records.push(DiffRecord {
            id: hash.trim().to_string(),
            title: body.lines().next().unwrap_or("").trim().to_string(),
            test_plan: test_plan_trailer(body),
            author_id: if email.is_empty() { name } else { email }.to_string(),
            closed_at,
            org,
            metadata_only: changes.is_empty(),
            changes,
            caused_sev: false,
        });
    }

    let mut requests = Vec::new();
    let mut slots = Vec::new();
    for (ri, record) in records.iter().enumerate() {
        for (ci, change) in record.changes.iter().enumerate() {
            if !change.is_deleted && !change.is_binary {
                requests.push(format!("{}:{}", record.id, change.path));
                slots.push((ri, ci));
            }
        }
    }
    for ((ri, ci), count) in slots.into_iter().zip(blob_line_counts(repo, &requests)?) {
        if let Some(lines) = count {
            records[ri].changes[ci].file_size_after = lines;
        }
    }

    let index: HashMap<String, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.clone(), i))
        .collect();
    for (hash, flag) in labels {
        let target = index.get(&hash).copied().or_else(|| {
            let mut hits = records
                .iter()
                .enumerate()
                .filter(|(_, r)| hash.len() >= 4 && r.id.starts_with(&hash));
            match (hits.next(), hits.next()) {
                (Some((i, _)), None) => Some(i),
                _ => None,
            }
        });
        match target {
            Some(i) => records[i].caused_sev = flag,
            None => warn!("SEV label for unknown commit {hash} ignored"),
        }
    }

    Corpus::new(records, Provenance::Git, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailer_extraction() {
        let body = "Fix the thing\n\nLonger text.\n\nTest-Plan: cargo test\n  and manual check\nReviewed-By: bob\n";
        assert_eq!(test_plan_trailer(body), "cargo test\nand manual check");
        assert_eq!(test_plan_trailer("just a subject\n"), "");
    }

    #[test]
    fn longest_prefix_wins() {
        let map: BTreeMap<String, String> = [("svc/".into(), "a".into()), ("svc/pay/".into(), "b".into())]
            .into_iter()
            .collect();
        assert_eq!(org_for_paths(["svc/pay/x.py"], &map), "b");
        assert_eq!(org_for_paths(["svc/x.py"], &map), "a");
        assert_eq!(org_for_paths(["other/x.py"], &map), UNSCOPED_ORG);
    }

    #[test]
    fn line_counting() {
        assert_eq!(count_lines(b""), 0);
        assert_eq!(count_lines(b"a\nb\n"), 2);
        assert_eq!(count_lines(b"a\nb"), 2);
    }

    #[test]
    fn label_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels");
        std::fs::write(&path, "# header\nABC123 1\ndef456 0\n").unwrap();
        let labels = read_sev_labels(&path).unwrap();
        assert_eq!(labels, vec![("abc123".into(), true), ("def456".into(), false)]);
        std::fs::write(&path, "abc 2\n").unwrap();
        assert!(matches!(read_sev_labels(&path), Err(Error::MalformedLine { line: 1, .. })));
    }
}
