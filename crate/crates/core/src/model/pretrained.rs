//! Loading the published base checkpoint through the in-repo name manifest.

use std::collections::BTreeMap;
use std::path::PathBuf;

use super::params::Layout;
use super::{ModelConfig, ParameterSet};
use crate::error::{Error, Result};
use crate::safetensors;

/// Environment variable consulted when the config names no weight file.
pub const WEIGHTS_ENV: &str = "ROCKSEG_SAM_WEIGHTS";

const MANIFEST: &str = include_str!("../../assets/sam_vit_base_manifest.txt");

const DOWNLOAD_HINT: &str = "download model.safetensors from the facebook/sam-vit-base \
repository on huggingface.co and pass it as model.weights_path or via ROCKSEG_SAM_WEIGHTS";

/// Parsed manifest: `(model name, checkpoint name)` pairs and ignored
/// checkpoint names.
pub fn translation_manifest() -> (Vec<(String, String)>, Vec<String>) {
    let mut pairs = Vec::new();
    let mut ignored = Vec::new();
    for line in MANIFEST.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('-') {
            ignored.push(rest.trim().to_string());
            continue;
        }
        let mut cols = line.split_whitespace();
        match (cols.next(), cols.next(), cols.next()) {
            (Some(a), Some(b), None) => pairs.push((a.to_string(), b.to_string())),
            _ => panic!("malformed manifest line: {line}"),
        }
    }
    (pairs, ignored)
}

pub(crate) fn weights_path(config: &ModelConfig) -> Option<PathBuf> {
    config
        .weights_path
        .clone()
        .or_else(|| std::env::var_os(WEIGHTS_ENV).map(PathBuf::from))
}

/// Loads base weights. Missing or extra tensors and shape mismatches are
/// errors.
pub(crate) fn load_pretrained(config: &ModelConfig, layout: &Layout) -> Result<ParameterSet> {
    let path = weights_path(config).filter(|p| p.is_file());
    let Some(path) = path else {
        return Err(Error::MissingWeights {
            path: weights_path(config),
            hint: DOWNLOAD_HINT.to_string(),
        });
    };
    let mut file = safetensors::read(&path)?;
    let (pairs, ignored) = translation_manifest();
    let map: BTreeMap<&str, &str> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let mut set = ParameterSet::default();
    for e in &layout.0 {
        let src = map
            .get(e.name.as_str())
            .ok_or_else(|| Error::WeightLayout(format!("manifest has no entry for '{}'", e.name)))?;
        let t = file
            .remove(*src)
            .ok_or_else(|| Error::WeightLayout(format!("checkpoint lacks '{src}'")))?;
        if t.shape != e.shape {
            return Err(Error::WeightLayout(format!(
                "'{src}' has shape {:?}, model expects {:?}",
                t.shape, e.shape
            )));
        }
        set.insert(&e.name, t.data, &e.shape);
    }
    let extra: Vec<&String> = file.keys().filter(|k| !ignored.contains(k)).collect();
    if !extra.is_empty() {
        return Err(Error::WeightLayout(format!("unmapped checkpoint tensors: {extra:?}")));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::model_layout;

    #[test]
    fn manifest_covers_base_layout_exactly() {
        let layout = model_layout(&ModelConfig::pretrained_base());
        let (pairs, _) = translation_manifest();
        let ours: std::collections::BTreeSet<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
        let theirs: std::collections::BTreeSet<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
        assert_eq!(ours.len(), pairs.len());
        assert_eq!(theirs.len(), pairs.len());
        let want: std::collections::BTreeSet<&str> = layout.0.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(ours, want);
    }

    #[test]
    fn absent_weights_give_hint() {
        let mut c = ModelConfig::pretrained_base();
        c.weights_path = Some("/nonexistent/model.safetensors".into());
        let err = load_pretrained(&c, &model_layout(&c)).unwrap_err();
        match err {
            Error::MissingWeights { hint, .. } => assert!(hint.contains("sam-vit-base")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn synthetic_checkpoint_loads_and_rejects_extras() {
        // shrink the base layout so the fixture stays small
        let mut c = ModelConfig::pretrained_base();
        c.encoder_embed_dim = 24;
        c.encoder_num_heads = 2;
        c.encoder_input_size = 128;
        c.window_size = 4;
        c.decoder_dim = 16;
        c.decoder_mlp_dim = 8;
        c.iou_head_hidden_dim = 8;
        c.decoder_num_heads = 2;
        c.mask_in_chans = 4;
        let layout = model_layout(&c);
        let (pairs, _) = translation_manifest();
        let map: BTreeMap<_, _> = pairs.iter().cloned().collect();
        let tensors: Vec<(String, Vec<usize>, Vec<f64>)> = layout
            .0
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let n: usize = e.shape.iter().product();
                (map[&e.name].clone(), e.shape.clone(), vec![i as f64; n])
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let bytes = safetensors::to_bytes(tensors.iter().map(|(n, s, d)| (n.as_str(), &s[..], &d[..])));
        std::fs::write(&path, bytes).unwrap();
        c.weights_path = Some(path.clone());
        let set = load_pretrained(&c, &layout).unwrap();
        assert_eq!(set.get("image_encoder.patch_embed.weight").data()[0], 0.0);
        assert_eq!(set.len(), layout.0.len());

        let mut with_extra = tensors.clone();
        with_extra.push(("stray.weight".into(), vec![1], vec![0.0]));
        let bytes = safetensors::to_bytes(with_extra.iter().map(|(n, s, d)| (n.as_str(), &s[..], &d[..])));
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_pretrained(&c, &layout), Err(Error::WeightLayout(_))));

        let bytes = safetensors::to_bytes(tensors[1..].iter().map(|(n, s, d)| (n.as_str(), &s[..], &d[..])));
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_pretrained(&c, &layout), Err(Error::WeightLayout(_))));
    }
}
