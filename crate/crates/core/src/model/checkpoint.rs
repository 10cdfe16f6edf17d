use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, ParamId};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "rul-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

/// On-disk container: config plus every tensor by name.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: BTreeMap<String, StoredTensor>,
}

impl From<&ModelParams> for Checkpoint {
    fn from(p: &ModelParams) -> Self {
        let tensors = ParamId::ALL
            .iter()
            .map(|&id| {
                let t = p.get(id);
                (
                    id.name().to_string(),
                    StoredTensor {
                        shape: [t.rows(), t.cols()],
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config: p.config,
            tensors,
        }
    }
}

impl Checkpoint {
    pub fn into_params(self) -> Result<ModelParams> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        self.config
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = ModelParams::zeros(self.config);
        let mut tensors = self.tensors;
        for &id in ParamId::ALL {
            let stored = tensors
                .remove(id.name())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", id.name())))?;
            let want = id.shape(&self.config);
            let [r, c] = stored.shape;
            if (r, c) != want || stored.data.len() != r * c {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?} with {} values, expected {want:?}",
                    id.name(),
                    stored.shape,
                    stored.data.len()
                )));
            }
            if stored.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("tensor `{}` has non-finite entries", id.name())));
            }
            params.set(id, Tensor::new(r, c, stored.data))?;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(params)
    }
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let body = serde_json::to_vec(&Checkpoint::from(params))?;
    crate::manifest::write_atomic(path, &body)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint =
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    ck.into_params()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let p = ModelParams::init(ModelConfig::new(20), 3);
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = ModelParams::init(ModelConfig::new(20), 3);
        let mut ck = Checkpoint::from(&p);
        ck.tensors.get_mut("W_q").unwrap().shape = [16, 64];
        assert!(matches!(ck.into_params(), Err(Error::Checkpoint(m)) if m.contains("W_q")));
        let mut ck = Checkpoint::from(&p);
        ck.tensors.remove("v_prime");
        assert!(matches!(ck.into_params(), Err(Error::Checkpoint(m)) if m.contains("v_prime")));
    }
}
