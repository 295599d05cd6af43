use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, SlaConfig, SlaModel};
use crate::subword::Vocabulary;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
const FORMAT: &str = "f64-le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

/// `manifest.json`: the config plus every tensor in blob order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: SlaConfig,
    pub vocab_size: usize,
    pub parameters: Vec<TensorEntry>,
}

impl CheckpointManifest {
    pub fn describe(model: &SlaModel) -> Self {
        Self {
            format: FORMAT.into(),
            config: model.config.clone(),
            vocab_size: model.vocab_size(),
            parameters: model
                .tensor_names()
                .into_iter()
                .zip(model.tensors())
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: [t.rows(), t.cols()],
                })
                .collect(),
        }
    }
}

/// Writes manifest, raw parameter blob and vocabulary into `dir`.
pub fn save_checkpoint(dir: &Path, model: &SlaModel, vocab: &Vocabulary) -> Result<(), ModelError> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest::describe(model);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    let mut blob = Vec::with_capacity(model.param_count() * 8);
    for t in model.tensors() {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(PARAMS_FILE), blob)?;
    fs::write(dir.join(VOCAB_FILE), vocab.to_text())?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(SlaModel, Vocabulary), ModelError> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT {
        return Err(ModelError::Checkpoint(format!("unsupported format {:?}", manifest.format)));
    }
    let vocab = Vocabulary::from_text(&fs::read_to_string(dir.join(VOCAB_FILE))?)?;
    if vocab.len() != manifest.vocab_size {
        return Err(ModelError::Checkpoint(format!(
            "vocabulary has {} entries, manifest says {}",
            vocab.len(),
            manifest.vocab_size
        )));
    }
    let mut model = SlaModel::new(manifest.config.clone(), manifest.vocab_size)?;
    let expected = CheckpointManifest::describe(&model).parameters;
    if expected != manifest.parameters {
        return Err(ModelError::Checkpoint("parameter listing does not match the config".into()));
    }
    let blob = fs::read(dir.join(PARAMS_FILE))?;
    if blob.len() != model.param_count() * 8 {
        return Err(ModelError::Checkpoint(format!(
            "parameter blob has {} bytes, expected {}",
            blob.len(),
            model.param_count() * 8
        )));
    }
    let mut chunks = blob.chunks_exact(8);
    for t in model.tensors_mut() {
        for (v, c) in t.data_mut().iter_mut().zip(&mut chunks) {
            *v = f64::from_le_bytes(c.try_into().expect("chunks are 8 bytes"));
        }
    }
    Ok((model, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subword::{CLS, PAD, SEP, UNK};

    #[test]
    fn round_trip_is_exact() {
        let vocab = Vocabulary::new([PAD, UNK, CLS, SEP, "x"].map(String::from).to_vec()).unwrap();
        let cfg = SlaConfig {
            n_layers: 1,
            hidden: 4,
            n_heads: 2,
            max_len: 8,
            ..SlaConfig::default()
        };
        let mut model = SlaModel::new(cfg, vocab.len()).unwrap();
        model.set_gate_bias(-1.25);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &vocab).unwrap();
        let (back, v) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(v, vocab);

        fs::write(dir.path().join(PARAMS_FILE), [0u8; 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(ModelError::Checkpoint(_))));
    }
}
