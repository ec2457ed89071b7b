//! Checkpoint directories: F64 safetensors weights, JSON state, the model
//! config and a plain-text manifest with checksums.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainingState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterSet, SegModel};
use crate::safetensors;

pub const FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const STATE_FILE: &str = "state.json";
pub const CONFIG_FILE: &str = "model_config.json";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub epoch: usize,
    pub val_loss: f64,
    pub trainable_params: usize,
    pub weights_sha256: String,
    pub state_sha256: String,
}

impl CheckpointManifest {
    fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format_version={}", self.format_version);
        let _ = writeln!(s, "config_hash={}", self.config_hash);
        let _ = writeln!(s, "epoch={}", self.epoch);
        let _ = writeln!(s, "val_loss={:?}", self.val_loss);
        let _ = writeln!(s, "trainable_params={}", self.trainable_params);
        let _ = writeln!(s, "weights_sha256={}", self.weights_sha256);
        let _ = writeln!(s, "state_sha256={}", self.state_sha256);
        s
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |m: String| Error::Format {
            path: path.clone(),
            message: m,
        };
        let mut kv = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad line '{line}'")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| bad(format!("missing '{k}'")));
        let parse_err = |k: &str| bad(format!("unparsable '{k}'"));
        Ok(CheckpointManifest {
            format_version: get("format_version")?
                .parse()
                .map_err(|_| parse_err("format_version"))?,
            config_hash: get("config_hash")?,
            epoch: get("epoch")?.parse().map_err(|_| parse_err("epoch"))?,
            val_loss: get("val_loss")?.parse().map_err(|_| parse_err("val_loss"))?,
            trainable_params: get("trainable_params")?
                .parse()
                .map_err(|_| parse_err("trainable_params"))?,
            weights_sha256: get("weights_sha256")?,
            state_sha256: get("state_sha256")?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StoredState {
    training: TrainingState,
    trainable: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a checkpoint for `model` as of `epoch` (1-based) into `dir`.
pub fn save_checkpoint(
    model: &SegModel,
    state: &TrainingState,
    epoch: usize,
    dir: &Path,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = model.params();
    let weights = safetensors::to_bytes(params.iter().map(|(n, p)| (n, p.tensor().shape(), p.tensor().data())));
    let stored = StoredState {
        training: state.clone(),
        trainable: params
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(n, _)| n.to_string())
            .collect(),
    };
    let state_bytes = serde_json::to_vec_pretty(&stored).expect("state serialises");
    let config_bytes = serde_json::to_vec_pretty(model.config()).expect("config serialises");
    let val_loss = epoch
        .checked_sub(1)
        .and_then(|i| state.history.get(i))
        .map_or(state.best_val_loss, |r| r.val_loss);
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config_hash: model.config().architecture_hash(),
        epoch,
        val_loss,
        trainable_params: model.count_trainable(),
        weights_sha256: sha256_hex(&weights),
        state_sha256: sha256_hex(&state_bytes),
    };
    write(&dir.join(WEIGHTS_FILE), &weights)?;
    write(&dir.join(STATE_FILE), &state_bytes)?;
    write(&dir.join(CONFIG_FILE), &config_bytes)?;
    write(&dir.join(MANIFEST_FILE), manifest.render().as_bytes())?;
    Ok(manifest)
}

fn verified_read(path: &Path, expected: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let found = sha256_hex(&bytes);
    if found != expected {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found,
        });
    }
    Ok(bytes)
}

/// The model config stored alongside a checkpoint.
pub fn checkpoint_config(dir: &Path) -> Result<ModelConfig> {
    let path = dir.join(CONFIG_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path,
        message: e.to_string(),
    })
}

/// Restores model weights, trainable flags and training state. With
/// `expected`, the checkpoint's architecture must match it.
pub fn load_checkpoint(
    dir: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(SegModel, TrainingState, CheckpointManifest)> {
    let manifest = CheckpointManifest::read(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let mut config = checkpoint_config(dir)?;
    if config.architecture_hash() != manifest.config_hash {
        return Err(Error::Incompatible(
            "stored config does not match the manifest hash".into(),
        ));
    }
    if let Some(want) = expected {
        if want.architecture_hash() != manifest.config_hash {
            return Err(Error::Incompatible(format!(
                "checkpoint architecture {} differs from the requested {}",
                &manifest.config_hash[..12],
                &want.architecture_hash()[..12]
            )));
        }
        config.seed = want.seed;
        config.weights_path = want.weights_path.clone();
    }
    let wpath = dir.join(WEIGHTS_FILE);
    let weights = verified_read(&wpath, &manifest.weights_sha256)?;
    let spath = dir.join(STATE_FILE);
    let state_bytes = verified_read(&spath, &manifest.state_sha256)?;
    let stored: StoredState = serde_json::from_slice(&state_bytes).map_err(|e| Error::Format {
        path: spath.clone(),
        message: e.to_string(),
    })?;
    let tensors = safetensors::from_bytes(&weights, &wpath)?;
    let mut params = ParameterSet::default();
    for (name, t) in tensors {
        params.insert(&name, t.data, &t.shape);
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for n in names {
        let trainable = stored.trainable.binary_search(&n).is_ok();
        params.set_trainable(&n, trainable);
    }
    let model = SegModel::from_parameters(&config, params)?;
    Ok((model, stored.training, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::training::{EpochRecord, TrainConfig};

    fn state() -> TrainingState {
        let mut s = TrainingState::new(&TrainConfig::default());
        s.history.push(EpochRecord {
            epoch: 1,
            train_loss: 0.9123456789012345,
            val_loss: 0.1 + 0.2,
            lr: 1e-5,
        });
        s.best_val_loss = 0.1 + 0.2;
        s.best_epoch = Some(1);
        s
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_model(&ModelConfig::toy()).unwrap();
        m.freeze_encoders();
        let s = state();
        let man = save_checkpoint(&m, &s, 1, dir.path()).unwrap();
        let (m2, s2, man2) = load_checkpoint(dir.path(), Some(m.config())).unwrap();
        assert_eq!(man, man2);
        assert_eq!(s, s2);
        assert_eq!(m.params().snapshot(), m2.params().snapshot());
        assert_eq!(m2.count_trainable(), m.count_trainable());
        for ((_, a), (_, b)) in m.params().iter().zip(m2.params().iter()) {
            let bits = |p: &crate::model::Param| p.tensor().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn mismatched_config_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(&ModelConfig::toy()).unwrap();
        save_checkpoint(&m, &state(), 1, dir.path()).unwrap();
        let mut other = ModelConfig::toy();
        other.decoder_mlp_dim = 64;
        assert!(matches!(
            load_checkpoint(dir.path(), Some(&other)),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn corrupted_weights_fail_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(&ModelConfig::toy()).unwrap();
        save_checkpoint(&m, &state(), 1, dir.path()).unwrap();
        let wpath = dir.path().join(WEIGHTS_FILE);
        let mut bytes = fs::read(&wpath).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&wpath, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path(), None), Err(Error::Checksum { .. })));
    }
}
