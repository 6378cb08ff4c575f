//! Single-file checkpoint: an 8-byte magic, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor as flat little-endian `f32`
//! in manifest order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig};
use crate::corpus::{Inventory, MelConfig, SpeakerLabels};
use crate::error::{Error, Result};
use crate::features::{NormalizationConfig, StubEmbedder};
use crate::model::{Model, ModelVariant};
use crate::tensor_io::{decode_f32, encode_f32};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CVTTSCK1";
const FORMAT_VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    /// Last completed training step; 0 for an untrained model.
    pub step: u64,
    pub model: crate::model::ModelConfig,
    pub train: TrainConfig,
    pub normalization: NormalizationConfig,
    pub inventory: Inventory,
    pub speaker_labels: SpeakerLabels,
    pub mel: MelConfig,
    /// Stub provider the model was trained with, if any.
    pub embedder: Option<StubEmbedder>,
    /// Adam update count when optimizer moments are stored.
    pub adam_t: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<(String, Array2<f64>)>,
}

/// Everything besides the weights that a checkpoint records.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub normalization: NormalizationConfig,
    pub inventory: Inventory,
    pub speaker_labels: SpeakerLabels,
    pub mel: MelConfig,
    pub embedder: Option<StubEmbedder>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: &CheckpointMeta, step: u64, adam: Option<&Adam>) -> Self {
        let mut tensors: Vec<(String, Array2<f64>)> = model
            .store
            .ids()
            .map(|id| (model.store.name(id).to_string(), model.store.value(id).clone()))
            .collect();
        if let Some(adam) = adam {
            for id in model.store.ids() {
                if let Some(Some((m, v))) = adam.moments.get(id.index()) {
                    let name = model.store.name(id);
                    tensors.push((format!("{ADAM_M}{name}"), m.clone()));
                    tensors.push((format!("{ADAM_V}{name}"), v.clone()));
                }
            }
        }
        let manifest = CheckpointManifest {
            format: FORMAT_VERSION,
            step,
            model: model.config.clone(),
            train: meta.train.clone(),
            normalization: meta.normalization,
            inventory: meta.inventory.clone(),
            speaker_labels: meta.speaker_labels.clone(),
            mel: meta.mel.clone(),
            embedder: meta.embedder,
            adam_t: adam.map(|a| a.t),
            tensors: tensors
                .iter()
                .map(|(n, a)| TensorEntry {
                    name: n.clone(),
                    shape: [a.nrows(), a.ncols()],
                })
                .collect(),
        };
        Self { manifest, tensors }
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            train: self.manifest.train.clone(),
            normalization: self.manifest.normalization,
            inventory: self.manifest.inventory.clone(),
            speaker_labels: self.manifest.speaker_labels.clone(),
            mel: self.manifest.mel.clone(),
            embedder: self.manifest.embedder,
        }
    }

    pub fn variant(&self) -> ModelVariant {
        self.manifest.model.variant
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.manifest).map_err(|e| ckpt_err(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in &self.tensors {
            out.extend_from_slice(&encode_f32(a));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(ckpt_err("not a checkpoint file (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| ckpt_err("truncated manifest"))?;
        let manifest: CheckpointManifest = serde_json::from_slice(json).map_err(|e| ckpt_err(e.to_string()))?;
        if manifest.format != FORMAT_VERSION {
            return Err(ckpt_err(format!("unsupported format version {}", manifest.format)));
        }
        let mut pos = 16 + len;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for t in &manifest.tensors {
            let n = t.shape[0] * t.shape[1] * 4;
            let chunk = bytes
                .get(pos..pos + n)
                .ok_or_else(|| ckpt_err(format!("truncated tensor {}", t.name)))?;
            tensors.push((t.name.clone(), decode_f32(chunk, t.shape[0], t.shape[1])?));
            pos += n;
        }
        if pos != bytes.len() {
            return Err(ckpt_err(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { manifest, tensors })
    }

    /// Atomic write through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Builds a model of `variant` (the checkpoint's own by default).
    ///
    /// Every stored weight must exist in the target model with the same
    /// shape. Weights the checkpoint lacks keep their fresh initialization,
    /// which is how an M1 checkpoint seeds M2 or M3.
    pub fn build_model(&self, variant: Option<ModelVariant>) -> Result<Model> {
        let variant = variant.unwrap_or(self.variant());
        let config = self.manifest.model.with_variant(variant);
        let mut model = Model::new(config, self.manifest.train.seed)?;
        for (name, value) in &self.tensors {
            if name.starts_with(ADAM_M) || name.starts_with(ADAM_V) {
                continue;
            }
            let id = model.store.get(name).ok_or_else(|| {
                ckpt_err(format!(
                    "{} checkpoint tensor {name} has no place in a {variant} model",
                    self.variant()
                ))
            })?;
            if model.store.value(id).dim() != value.dim() {
                return Err(ckpt_err(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    value.dim(),
                    model.store.value(id).dim()
                )));
            }
            *model.store.value_mut(id) = value.clone();
        }
        Ok(model)
    }

    /// Optimizer state stored alongside the weights, if any.
    pub fn adam(&self, model: &Model) -> Option<Adam> {
        let t = self.manifest.adam_t?;
        let tc = &self.manifest.train;
        let mut adam = Adam::new(tc.adam_beta1, tc.adam_beta2, tc.adam_eps, tc.grad_clip);
        adam.t = t;
        adam.moments = vec![None; model.store.len()];
        for id in model.store.ids() {
            let name = model.store.name(id);
            if let (Some(m), Some(v)) = (
                self.tensor(&format!("{ADAM_M}{name}")),
                self.tensor(&format!("{ADAM_V}{name}")),
            ) {
                adam.moments[id.index()] = Some((m.clone(), v.clone()));
            }
        }
        Some(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            train: TrainConfig::default(),
            normalization: NormalizationConfig::new(10, 20, 3).unwrap(),
            inventory: Inventory::new(["a", "b", "c", "-", "."]),
            speaker_labels: SpeakerLabels::default(),
            mel: MelConfig::default(),
            embedder: Some(StubEmbedder::default()),
        }
    }

    #[test]
    fn bytes_round_trip_is_exact() {
        let model = Model::new(ModelConfig::desk(ModelVariant::M2, 5), 1).unwrap();
        let ck = Checkpoint::from_model(&model, &meta(), 7, None);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.manifest.step, 7);
        let rebuilt = back.build_model(None).unwrap();
        let again = Checkpoint::from_model(&rebuilt, &back.meta(), 7, None);
        assert_eq!(again.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::new(ModelConfig::desk(ModelVariant::M1, 5), 1).unwrap();
        let bytes = Checkpoint::from_model(&model, &meta(), 0, None).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn richer_checkpoint_does_not_fit_poorer_variant() {
        let model = Model::new(ModelConfig::desk(ModelVariant::M3, 5), 1).unwrap();
        let ck = Checkpoint::from_model(&model, &meta(), 0, None);
        assert!(matches!(ck.build_model(Some(ModelVariant::M1)), Err(Error::Checkpoint(_))));
        assert!(ck.build_model(Some(ModelVariant::M3)).is_ok());
    }
}
