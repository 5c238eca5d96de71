//! Mining a scripted repository and checking churn against `git log --numstat`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use diffrisk::corpus::mine_git;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn git(repo: &Path, args: &[&str], when: i64) -> String {
    let date = format!("{when} +0000");
    let out = Command::new("git")
        .current_dir(repo)
        .args(["-c", "user.name=Dev", "-c", "commit.gpgsign=false", "-c", "core.autocrlf=false"])
        .args(args)
        .env("GIT_AUTHOR_DATE", &date)
        .env("GIT_COMMITTER_DATE", &date)
        .env("GIT_AUTHOR_EMAIL", "dev@example.com")
        .env("GIT_COMMITTER_EMAIL", "dev@example.com")
        .output()
        .expect("git");
    assert!(out.status.success(), "git {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn random_lines(rng: &mut impl Rng, n: usize) -> String {
    (0..n)
        .map(|_| format!("line {} if x{}\n", rng.random_range(0..50), rng.random_range(0..9)))
        .collect()
}

/// 100 commits of edits, additions, deletions, renames, binary and empty files.
fn scripted_repo(root: &Path) {
    git(root, &["init", "-q", "-b", "main"], 0);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut files: Vec<String> = Vec::new();
    let t0 = 1_700_000_000;
    for i in 0..100 {
        let op = if files.len() < 3 { 0 } else { rng.random_range(0..10) };
        match op {
            0..=2 => {
                let dir = ["svc", "lib", "tools/ci"][rng.random_range(0..3)];
                let ext = ["py", "rs", "go", "java"][rng.random_range(0..4)];
                let path = format!("{dir}/f{i}.{ext}");
                fs::create_dir_all(root.join(dir)).unwrap();
                let n = rng.random_range(0..15);
                fs::write(root.join(&path), random_lines(&mut rng, n)).unwrap();
                files.push(path);
            }
            3..=6 => {
                for _ in 0..rng.random_range(1..4) {
                    let path = &files[rng.random_range(0..files.len())];
                    let old = fs::read_to_string(root.join(path)).unwrap();
                    let mut lines: Vec<String> = old.lines().map(|l| format!("{l}\n")).collect();
                    for _ in 0..rng.random_range(1..6) {
                        if !lines.is_empty() && rng.random_bool(0.5) {
                            let k = rng.random_range(0..lines.len());
                            lines.remove(k);
                        } else {
                            let k = rng.random_range(0..=lines.len());
                            lines.insert(k, random_lines(&mut rng, 1));
                        }
                    }
                    let mut text = lines.concat();
                    if rng.random_bool(0.1) {
                        text.pop();
                    }
                    fs::write(root.join(path), text).unwrap();
                }
            }
            7 => {
                let k = rng.random_range(0..files.len());
                let path = files.remove(k);
                git(root, &["rm", "-q", &path], 0);
            }
            8 => {
                let k = rng.random_range(0..files.len());
                let old = files[k].clone();
                let new = format!("moved/m{i}_{}", old.rsplit('/').next().unwrap());
                fs::create_dir_all(root.join("moved")).unwrap();
                git(root, &["mv", &old, &new], 0);
                files[k] = new;
            }
            _ => {
                let bytes: Vec<u8> = (0..64).map(|_| rng.random()).collect();
                fs::write(root.join(format!("blob{i}.bin")), bytes).unwrap();
            }
        }
        git(root, &["add", "-A"], 0);
        git(
            root,
            &["commit", "-q", "--allow-empty", "-m", &format!("commit {i}\n\nTest-Plan: t{i}")],
            t0 + 60 * i,
        );
    }
}

#[test]
fn churn_matches_numstat() {
    let dir = tempfile::tempdir().unwrap();
    scripted_repo(dir.path());
    let corpus = mine_git(dir.path(), None, &Default::default()).unwrap();
    assert_eq!(corpus.len(), 100);

    let log = git(dir.path(), &["log", "-M", "--numstat", "--format=%x00%H"], 0);
    let mut expected: HashMap<String, usize> = HashMap::new();
    for chunk in log.split('\0').filter(|c| !c.trim().is_empty()) {
        let mut lines = chunk.lines();
        let hash = lines.next().unwrap().trim().to_string();
        let churn = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let mut f = l.split('\t');
                let (a, d) = (f.next().unwrap(), f.next().unwrap());
                a.parse::<usize>().unwrap_or(0) + d.parse::<usize>().unwrap_or(0)
            })
            .sum();
        expected.insert(hash, churn);
    }
    assert_eq!(expected.len(), 100);
    for (i, r) in corpus.records().iter().enumerate() {
        assert_eq!(r.churn(), expected[&r.id], "commit {} ({})", i, r.title);
        assert_eq!(r.title, format!("commit {i}"));
        assert_eq!(r.test_plan, format!("t{i}"));
        assert_eq!(r.closed_at, 1_700_000_000 + 60 * i as i64);
        assert_eq!(r.author_id, "dev@example.com");
    }
    let renames = corpus.records().iter().flat_map(|r| &r.changes).filter(|c| c.old_path.is_some()).count();
    let binaries = corpus.records().iter().flat_map(|r| &r.changes).filter(|c| c.is_binary).count();
    assert!(renames > 0 && binaries > 0, "fixture lacks renames ({renames}) or binaries ({binaries})");
}

#[test]
fn file_sizes_match_the_tree() {
    let dir = tempfile::tempdir().unwrap();
    scripted_repo(dir.path());
    let corpus = mine_git(dir.path(), None, &Default::default()).unwrap();
    for r in corpus.records() {
        for c in r.changes.iter().filter(|c| !c.is_deleted && !c.is_binary) {
            let blob = git(dir.path(), &["cat-file", "-p", &format!("{}:{}", r.id, c.path)], 0);
            let lines = blob.lines().count() as u64;
            assert_eq!(c.file_size_after, lines, "{} in {}", c.path, r.title);
        }
    }
}
