//! JSON checkpoints and the backbone weight import seam.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{CopaError, Result};
use crate::harness::train::TrainHistory;
use crate::model::{CopaModel, ModelConfig};
use crate::params::{ParamGroup, ParamStore, Parameter};
use crate::schema::ConceptSchema;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub group: ParamGroup,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl StoredParam {
    fn from_param(p: &Parameter) -> Self {
        Self {
            name: p.name.clone(),
            group: p.group,
            shape: [p.value.nrows(), p.value.ncols()],
            data: p.value.iter().copied().collect(),
        }
    }

    fn to_array(&self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| CopaError::Checkpoint(format!("{}: {e}", self.name)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub schema: ConceptSchema,
    pub schema_hash: String,
    /// Parameter checksum at save time.
    pub checksum: String,
    /// The run that produced the parameters, if any; used to rebuild splits.
    pub train: Option<TrainConfig>,
    pub history: Option<TrainHistory>,
    pub params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn from_model(model: &CopaModel, train: Option<&TrainConfig>, history: Option<&TrainHistory>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model: model.config.clone(),
            schema: model.schema.clone(),
            schema_hash: model.schema.hash(),
            checksum: model.checksum(),
            train: train.cloned(),
            history: history.cloned(),
            params: model.store.iter().map(|(_, p)| StoredParam::from_param(p)).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CopaError::io(dir, e))?;
        }
        let json = serde_json::to_string(self).map_err(|e| CopaError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| CopaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CopaError::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|e| CopaError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CopaError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuilds the model and verifies the stored checksum.
    pub fn into_model(self) -> Result<CopaModel> {
        if self.schema.hash() != self.schema_hash {
            return Err(CopaError::Checkpoint("schema hash mismatch".into()));
        }
        let params = self
            .params
            .iter()
            .map(|p| {
                Ok(Parameter {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.to_array()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = CopaModel::from_store(self.model, self.schema, ParamStore::from_parts(params))?;
        if model.checksum() != self.checksum {
            return Err(CopaError::Checkpoint("parameter checksum mismatch".into()));
        }
        Ok(model)
    }
}

pub fn save_model(model: &CopaModel, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model, None, None).save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CopaModel> {
    Checkpoint::load(path)?.into_model()
}

/// External backbone weights: a JSON list of named tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneWeights {
    pub params: Vec<StoredParam>,
}

/// Overwrites backbone parameters by name (for pretrained weights). Every
/// entry must name an existing backbone tensor of the same shape; tensors
/// not listed keep their values. Returns the number of tensors replaced.
pub fn import_backbone(model: &mut CopaModel, weights: &BackboneWeights) -> Result<usize> {
    for w in &weights.params {
        let id = model
            .store
            .find(&w.name)
            .ok_or_else(|| CopaError::Checkpoint(format!("unknown tensor {}", w.name)))?;
        let p = model.store.get(id);
        if p.group != ParamGroup::Backbone {
            return Err(CopaError::Checkpoint(format!("{} is not a backbone tensor", w.name)));
        }
        if p.value.dim() != (w.shape[0], w.shape[1]) {
            return Err(CopaError::Checkpoint(format!(
                "{}: shape {:?} does not match {:?}",
                w.name,
                w.shape,
                p.value.dim()
            )));
        }
        let value = w.to_array()?;
        *model.store.value_mut(id) = value;
    }
    Ok(weights.params.len())
}

pub fn import_backbone_file(model: &mut CopaModel, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CopaError::io(path, e))?;
    let weights: BackboneWeights = serde_json::from_str(&text).map_err(|e| CopaError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    import_backbone(model, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_image, tiny_model};

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = tiny_model();
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.checksum(), model.checksum());
        assert_eq!(back.predict(&tiny_image(0)).unwrap(), model.predict(&tiny_image(0)).unwrap());
    }

    #[test]
    fn tampered_values_are_detected() {
        let mut ckpt = Checkpoint::from_model(&tiny_model(), None, None);
        ckpt.params[0].data[0] += 1.0;
        assert!(matches!(ckpt.into_model(), Err(CopaError::Checkpoint(_))));
    }

    #[test]
    fn renamed_tensor_is_rejected() {
        let mut ckpt = Checkpoint::from_model(&tiny_model(), None, None);
        ckpt.params[1].name = "nope".into();
        assert!(ckpt.into_model().is_err());
    }

    #[test]
    fn backbone_import_replaces_named_tensors() {
        let mut model = tiny_model();
        let id = model.store.find("backbone.patch.bias").unwrap();
        let dim = model.store.value(id).dim();
        let w = BackboneWeights {
            params: vec![StoredParam {
                name: "backbone.patch.bias".into(),
                group: ParamGroup::Backbone,
                shape: [dim.0, dim.1],
                data: vec![0.5; dim.0 * dim.1],
            }],
        };
        assert_eq!(import_backbone(&mut model, &w).unwrap(), 1);
        assert!(model.store.value(id).iter().all(|&v| v == 0.5));

        let bad = BackboneWeights {
            params: vec![StoredParam {
                name: "head.bias".into(),
                group: ParamGroup::Head,
                shape: [1, 2],
                data: vec![0.0; 2],
            }],
        };
        assert!(import_backbone(&mut model, &bad).is_err());
    }
}
