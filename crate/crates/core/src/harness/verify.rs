//! Re-hashes an output tree and cross-checks every config hash stamp.

use std::fs;
use std::path::{Path, PathBuf};

use super::run::{list_checkpoints, load_model, read_tsv, sha256_file, stamped_hash, ArtifactLog, CONFIG_FILE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub runs: usize,
    pub checkpoints: usize,
    pub files: usize,
    pub tables: usize,
    pub problems: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

fn dirs_under(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = vec![root.to_path_buf()];
    let mut i = 0;
    while i < out.len() {
        let dir = out[i].clone();
        let mut children = Vec::new();
        for e in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = e.map_err(|e| Error::io(&dir, e))?.path();
            if p.is_dir() {
                children.push(p);
            }
        }
        children.sort();
        out.extend(children);
        i += 1;
    }
    Ok(out)
}

fn files_in(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Nearest ancestor (or self) holding a run config, and its stamped hash.
fn owning_hash(dir: &Path, root: &Path) -> Option<String> {
    let mut d = Some(dir);
    while let Some(cur) = d {
        if cur.join(CONFIG_FILE).exists() {
            return stamped_hash(cur).ok().map(|(_, h)| h);
        }
        if cur == root {
            break;
        }
        d = cur.parent();
    }
    None
}

/// Checks every run under `root`: the config file re-hashes to its stamp,
/// checkpoints restore and match their manifests and the run hash, every
/// registered artifact re-hashes to its recorded digest, and every table
/// with a `config_hash` column carries the owning run's hash.
pub fn verify_tree(root: &Path) -> Result<VerifyReport> {
    let mut rep = VerifyReport::default();
    for dir in dirs_under(root)? {
        let run_hash = if dir.join(CONFIG_FILE).exists() {
            rep.runs += 1;
            match stamped_hash(&dir) {
                Ok((cfg, stamp)) => {
                    if cfg.hash() != stamp {
                        rep.problems.push(format!(
                            "{}: config hashes to {}, stamp says {stamp}",
                            dir.display(),
                            cfg.hash()
                        ));
                    }
                    Some(stamp)
                }
                Err(e) => {
                    rep.problems.push(format!("{}: {e}", dir.display()));
                    None
                }
            }
        } else {
            owning_hash(&dir, root)
        };

        for (_, stem) in list_checkpoints(&dir)? {
            rep.checkpoints += 1;
            match load_model(&stem) {
                Ok(m) => {
                    if let Some(h) = &run_hash {
                        if &m.manifest.config_hash != h {
                            rep.problems.push(format!(
                                "{}: checkpoint config hash {} differs from run {h}",
                                stem.display(),
                                m.manifest.config_hash
                            ));
                        }
                    }
                }
                Err(e) => rep.problems.push(format!("{}: {e}", stem.display())),
            }
        }

        let log = ArtifactLog::load(&dir)?;
        for (rel, (sha, hash)) in &log.entries {
            rep.files += 1;
            let path = dir.join(rel);
            match sha256_file(&path) {
                Ok(actual) if &actual == sha => {}
                Ok(actual) => rep
                    .problems
                    .push(format!("{}: sha256 {actual}, registered {sha}", path.display())),
                Err(e) => rep.problems.push(e.to_string()),
            }
            if run_hash.as_ref().is_some_and(|h| h != hash) {
                rep.problems
                    .push(format!("{}: registered under config hash {hash}", path.display()));
            }
        }

        for table in files_in(&dir, "tsv")? {
            let (header, rows) = read_tsv(&table)?;
            let Some(col) = header.iter().position(|h| h == "config_hash") else {
                continue;
            };
            rep.tables += 1;
            let expected = run_hash.clone().or_else(|| rows.first().and_then(|r| r.get(col).cloned()));
            for (i, r) in rows.iter().enumerate() {
                if r.get(col) != expected.as_ref() {
                    rep.problems.push(format!(
                        "{} row {}: config hash {:?}, expected {:?}",
                        table.display(),
                        i + 1,
                        r.get(col),
                        expected
                    ));
                }
            }
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run::tests::tiny_run_config;
    use crate::harness::run::{cmd_train, Session, LOG_FILE};

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("r");
        let mut cfg = tiny_run_config();
        cfg.total_kimg = 0.004;
        cmd_train(&Session::open(cfg).unwrap(), &run, false).unwrap();
        let rep = verify_tree(dir.path()).unwrap();
        assert!(rep.ok(), "{:?}", rep.problems);
        assert_eq!((rep.runs, rep.checkpoints), (1, 2));
        assert!(rep.files >= 5 && rep.tables >= 2);

        let log = run.join(LOG_FILE);
        let text = fs::read_to_string(&log).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let last = lines.last_mut().unwrap();
        let cut = last.rfind('\t').unwrap();
        last.replace_range(cut + 1.., "deadbeef");
        fs::write(&log, lines.join("\n") + "\n").unwrap();
        let rep = verify_tree(dir.path()).unwrap();
        assert!(rep.problems.iter().any(|p| p.contains("deadbeef")));
        assert!(rep.problems.iter().any(|p| p.contains("sha256")));
    }
}
