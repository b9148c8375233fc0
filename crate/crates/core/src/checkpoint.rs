//! JSON checkpoints holding config, parameters and optimizer state. Floats
//! are written in shortest round-trip form, so save/load is bit exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{PieError, Result};
use crate::model::PieModel;
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub input_shape: Vec<usize>,
    /// Completed optimizer updates.
    pub step: u64,
    pub params: Vec<NamedTensor>,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, model: &PieModel, optimizer: &AdamState, step: u64) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            input_shape: model.architecture().input_shape.clone(),
            step,
            params: model
                .params()
                .iter()
                .map(|(_, name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(rename_all = "camelCase")]
        struct Version {
            format_version: u32,
        }
        let v: Version = serde_json::from_str(text).map_err(|e| PieError::Checkpoint(e.to_string()))?;
        if v.format_version != FORMAT_VERSION {
            return Err(PieError::Checkpoint(format!(
                "unsupported checkpoint version {}, expected {FORMAT_VERSION}",
                v.format_version
            )));
        }
        serde_json::from_str(text).map_err(|e| PieError::Checkpoint(e.to_string()))
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PieError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Rebuilds the model and optimizer state.
    pub fn restore(&self) -> Result<(PieModel, AdamState)> {
        self.config.validate()?;
        let mut model = PieModel::new(self.config.architecture(&self.input_shape), self.config.seed)?;
        let store = model.params_mut();
        if store.len() != self.params.len() {
            return Err(PieError::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let slot = store
                .by_name_mut(&p.name)
                .ok_or_else(|| PieError::Checkpoint(format!("unknown parameter '{}'", p.name)))?;
            if slot.shape() != p.shape.as_slice() {
                return Err(PieError::Checkpoint(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    p.name,
                    p.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(p.shape.clone(), p.data.clone())
                .map_err(|e| PieError::Checkpoint(format!("parameter '{}': {e}", p.name)))?;
        }
        if !self.optimizer.matches(model.params()) {
            return Err(PieError::Checkpoint("optimizer state does not match parameters".into()));
        }
        Ok((model, self.optimizer.clone()))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (TrainConfig, PieModel) {
        let cfg = TrainConfig::new(0.1, 10, 3, vec![1]);
        let mut model = PieModel::new(cfg.architecture(&[2]), cfg.seed).unwrap();
        model.perturb_parameters(1, 0.5);
        (cfg, model)
    }

    #[test]
    fn restore_is_bit_exact() {
        let (cfg, model) = toy();
        let mut opt = AdamState::new(model.params());
        opt.t = 7;
        opt.m[0][0] = 1.0 / 3.0;
        let ck = Checkpoint::capture(&cfg, &model, &opt, 7);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let (m2, o2) = back.restore().unwrap();
        assert_eq!(o2, opt);
        for ((_, n1, a), (_, n2, b)) in model.params().iter().zip(m2.params().iter()) {
            assert_eq!(n1, n2);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn version_and_shape_checks() {
        let (cfg, model) = toy();
        let opt = AdamState::new(model.params());
        let mut ck = Checkpoint::capture(&cfg, &model, &opt, 0);
        ck.format_version = 99;
        assert!(matches!(Checkpoint::from_json(&ck.to_json().unwrap()), Err(PieError::Checkpoint(_))));
        ck.format_version = FORMAT_VERSION;
        ck.params[0].shape = vec![999];
        assert!(ck.restore().is_err());
        assert!(Checkpoint::from_json("{").is_err());
    }

    #[test]
    fn save_and_load() {
        let (cfg, model) = toy();
        let opt = AdamState::new(model.params());
        let ck = Checkpoint::capture(&cfg, &model, &opt, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(!dir.path().join("c.json.tmp").exists());
    }
}
