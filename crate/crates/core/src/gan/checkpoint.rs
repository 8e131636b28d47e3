use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use sha2::{Digest, Sha256};

use super::train::TrainState;
use crate::error::{Error, Result};
use crate::nn::{tensor_from, to_f64_vec};

const HEADER: &str = "# headlab-checkpoint";

/// Plain-text companion of a checkpoint archive.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointManifest {
    pub step: u64,
    pub config_hash: String,
    pub representation: String,
    pub strategy: String,
    pub checkpoint_hash: String,
    /// The run configuration, verbatim, as ordered key/value pairs.
    pub config: Vec<(String, String)>,
}

impl CheckpointManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{HEADER}\nstep\t{}\nconfig_hash\t{}\nrepresentation\t{}\nstrategy\t{}\ncheckpoint_hash\t{}\n",
            self.step, self.config_hash, self.representation, self.strategy, self.checkpoint_hash
        );
        for (k, v) in &self.config {
            s.push_str(&format!("config\t{k}={v}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Checkpoint("manifest header missing".into()));
        }
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        let mut config = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::Checkpoint(format!("malformed manifest line '{line}'")))?;
            if k == "config" {
                let (ck, cv) = v
                    .split_once('=')
                    .ok_or_else(|| Error::Checkpoint(format!("malformed config entry '{v}'")))?;
                config.push((ck.to_string(), cv.to_string()));
            } else {
                fields.insert(k, v);
            }
        }
        let missing: Vec<&str> = ["step", "config_hash", "representation", "strategy", "checkpoint_hash"]
            .into_iter()
            .filter(|k| !fields.contains_key(k))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "manifest lacks fields: {}",
                missing.join(", ")
            )));
        }
        Ok(Self {
            step: fields["step"]
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad step '{}'", fields["step"])))?,
            config_hash: fields["config_hash"].to_string(),
            representation: fields["representation"].to_string(),
            strategy: fields["strategy"].to_string(),
            checkpoint_hash: fields["checkpoint_hash"].to_string(),
            config,
        })
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn archive_path(stem: &Path) -> PathBuf {
    stem.with_extension("safetensors")
}

fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("manifest")
}

fn state_tensors(state: &TrainState) -> Result<BTreeMap<String, Tensor>> {
    let mut all = BTreeMap::new();
    for (k, v) in state.g.store.to_tensors() {
        all.insert(format!("g.{k}"), v);
    }
    for (k, v) in state.d.store.to_tensors() {
        all.insert(format!("d.{k}"), v);
    }
    all.extend(state.opt_g.state_tensors("opt_g."));
    all.extend(state.opt_d.state_tensors("opt_d."));
    all.insert(
        "state.scalars".into(),
        tensor_from(
            vec![state.step as f64, state.p_swap, state.last_r1],
            3,
            candle_core::DType::F64,
        )?,
    );
    Ok(all)
}

/// SHA-256 over every tensor (name, shape, f64 values) of the training
/// state, including optimizer moments and the step counter.
pub fn checkpoint_hash(state: &TrainState) -> Result<String> {
    let mut h = Sha256::new();
    for (k, t) in state_tensors(state)? {
        h.update(k.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in to_f64_vec(&t)? {
            h.update(x.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes `<stem>.safetensors` and `<stem>.manifest`.
pub fn save_checkpoint(
    state: &TrainState,
    stem: &Path,
    config_hash: &str,
    config: &[(String, String)],
) -> Result<CheckpointManifest> {
    let tensors: HashMap<String, Tensor> = state_tensors(state)?.into_iter().collect();
    let archive = archive_path(stem);
    if let Some(dir) = archive.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    candle_core::safetensors::save(&tensors, &archive)?;
    let manifest = CheckpointManifest {
        step: state.step,
        config_hash: config_hash.to_string(),
        representation: state.cfg.layout.kind.to_string(),
        strategy: state.cfg.strategy.kind.to_string(),
        checkpoint_hash: checkpoint_hash(state)?,
        config: config.to_vec(),
    };
    let mpath = manifest_path(stem);
    fs::write(&mpath, manifest.to_text()).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(stem: &Path) -> Result<CheckpointManifest> {
    let mpath = manifest_path(stem);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    CheckpointManifest::parse(&text)
}

/// Restores parameters, optimizer state and counters into `state`, whose
/// architecture must match the checkpoint. Fails with the list of missing
/// fields when the archive is incomplete.
pub fn load_checkpoint(state: &mut TrainState, stem: &Path) -> Result<CheckpointManifest> {
    let manifest = read_manifest(stem)?;
    let archive = archive_path(stem);
    if !archive.exists() {
        return Err(Error::Checkpoint(format!("missing archive {}", archive.display())));
    }
    let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load(&archive, &Device::Cpu)?
        .into_iter()
        .collect();
    state.g.store.load_tensors(&tensors, "g.")?;
    state.d.store.load_tensors(&tensors, "d.")?;
    state.opt_g.load_state(&tensors, "opt_g.")?;
    state.opt_d.load_state(&tensors, "opt_d.")?;
    let scalars = tensors
        .get("state.scalars")
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks fields: state.scalars".into()))?;
    let s = to_f64_vec(scalars)?;
    state.step = s[0] as u64;
    state.p_swap = s[1];
    state.last_r1 = s[2];
    let hash = checkpoint_hash(state)?;
    if hash != manifest.checkpoint_hash {
        return Err(Error::Checkpoint(format!(
            "archive hash {hash} does not match manifest {}",
            manifest.checkpoint_hash
        )));
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::StrategyKind;
    use crate::gan::generator::tests::tiny_config;

    #[test]
    fn round_trip_restores_state() {
        let cfg = tiny_config(StrategyKind::SemanticFront);
        let mut a = TrainState::new(&cfg, 1).unwrap();
        a.step = 7;
        a.p_swap = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let conf = vec![("kind".to_string(), "hy_plane".to_string())];
        let m = save_checkpoint(&a, &stem, "abc", &conf).unwrap();
        let mut b = TrainState::new(&cfg, 2).unwrap();
        assert_ne!(checkpoint_hash(&b).unwrap(), m.checkpoint_hash);
        let m2 = load_checkpoint(&mut b, &stem).unwrap();
        assert_eq!(m, m2);
        assert_eq!(b.step, 7);
        assert_eq!(checkpoint_hash(&b).unwrap(), m.checkpoint_hash);
        assert_eq!(m2.config_value("kind"), Some("hy_plane"));
    }

    #[test]
    fn manifest_reports_missing_fields() {
        let err = CheckpointManifest::parse("# headlab-checkpoint\nstep\t3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("config_hash") && msg.contains("strategy"), "{msg}");
    }
}
