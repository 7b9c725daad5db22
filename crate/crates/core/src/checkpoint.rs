//! JSON checkpoints. Tensors are stored as base64 little-endian `f64` so
//! a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::augmenter::{AugmenterConfig, Augmenters};
use crate::autograd::Tensor;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::trainer::{TrainConfig, TrainState};

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredTensor {
    rows: usize,
    cols: usize,
    data: String,
}

impl StoredTensor {
    fn encode(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.iter().flat_map(|x| x.to_le_bytes()).collect();
        Self {
            rows: t.nrows(),
            cols: t.ncols(),
            data: STANDARD.encode(bytes),
        }
    }

    fn decode(&self, name: &str) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(Error::Checkpoint(format!(
                "{name}: expected {}×{} values, found {} bytes",
                self.rows,
                self.cols,
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::from_shape_vec((self.rows, self.cols), values).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub num_items: usize,
    pub config: TrainConfig,
    pub epoch: usize,
    pub best: Option<(f64, usize)>,
    tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: &TrainConfig) -> Self {
        let mut tensors = BTreeMap::new();
        for (prefix, set) in [("encoder", &state.theta), ("augmenter", &state.phi)] {
            for (name, t) in set.iter() {
                tensors.insert(format!("{prefix}.{name}"), StoredTensor::encode(t));
            }
        }
        Self {
            version: FORMAT_VERSION,
            num_items: state.encoder.cfg.num_items,
            config: config.clone(),
            epoch: state.epoch,
            best: state.best,
            tensors,
        }
    }

    fn group(&self, prefix: &str) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, stored) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) {
                out.insert(rest, stored.decode(name)?);
            }
        }
        Ok(out)
    }

    /// Rebuilds the model with fresh optimizer state.
    pub fn into_state(&self) -> Result<TrainState> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", self.version)));
        }
        let encoder = Encoder::new(EncoderConfig::new(self.num_items, &self.config.model));
        let augmenters = Augmenters::new(AugmenterConfig::new(
            self.config.model.hidden,
            self.config.variant.shares_augmenters(),
        ));
        let theta = self.group("encoder")?;
        let phi = self.group("augmenter")?;
        // Shapes must agree with a fresh initialization of the same config.
        for (set, fresh) in [(&theta, encoder.init(0)), (&phi, augmenters.init(0))] {
            let want: Vec<_> = fresh.iter().map(|(n, t)| (n.clone(), t.dim())).collect();
            let have: Vec<_> = set.iter().map(|(n, t)| (n.clone(), t.dim())).collect();
            if want != have {
                return Err(Error::Checkpoint("parameter names or shapes do not match the stored config".into()));
            }
        }
        let mut state = TrainState::from_parts(encoder, augmenters, theta, phi, &self.config)?;
        state.epoch = self.epoch;
        state.best = self.best;
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = TrainConfig {
            model: ModelConfig {
                hidden: 4,
                max_len: 5,
                blocks: 1,
                heads: 2,
                dropout: 0.1,
            },
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(9, &cfg).unwrap();
        state.theta.get_mut("final_norm.bias").unwrap()[[0, 1]] = f64::MIN_POSITIVE / 3.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::from_state(&state, &cfg).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().into_state().unwrap();
        assert_eq!(back.theta.checksum(), state.theta.checksum());
        assert_eq!(back.phi.checksum(), state.phi.checksum());
        assert_eq!(back.encoder.cfg, state.encoder.cfg);
    }

    #[test]
    fn corrupted_tensors_are_reported() {
        let cfg = TrainConfig {
            model: ModelConfig {
                hidden: 2,
                max_len: 3,
                blocks: 1,
                heads: 1,
                dropout: 0.0,
            },
            ..TrainConfig::default()
        };
        let state = TrainState::new(3, &cfg).unwrap();
        let mut ck = Checkpoint::from_state(&state, &cfg);
        ck.tensors.get_mut("encoder.final_norm.gain").unwrap().data = STANDARD.encode([0u8; 3]);
        let err = ck.into_state().unwrap_err();
        assert!(err.to_string().contains("final_norm.gain"), "{err}");

        let mut ck = Checkpoint::from_state(&state, &cfg);
        ck.tensors.remove("augmenter.phi2.layer0.bias");
        assert!(matches!(ck.into_state(), Err(Error::Checkpoint(_))));
    }
}
