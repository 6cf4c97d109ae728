use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderParams, MomentumParams, OptimizerState};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing JSON checkpoint of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Training epoch the parameters were taken after; `None` for the
    /// pretrained encoder.
    pub epoch: Option<usize>,
    pub config_hash: String,
    pub params: EncoderParams,
    pub momentum: Option<MomentumParams>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(params: EncoderParams, epoch: Option<usize>, config_hash: impl Into<String>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch,
            config_hash: config_hash.into(),
            params,
            momentum: None,
            optimizer: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads and checks internal consistency of all arrays.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Loads and additionally requires the encoder widths `[d_in, ..., d]`
    /// and coarse class count to match.
    pub fn load_expecting(path: &Path, shape: &[usize], n_coarse: usize) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let actual = ckpt.params.net.shape();
        if actual != shape || ckpt.params.n_coarse() != n_coarse {
            return Err(Error::ShapeMismatch {
                what: format!("checkpoint {}", path.display()),
                detail: format!(
                    "expected widths {shape:?} with {n_coarse} coarse classes, found {actual:?} with {}",
                    ckpt.params.n_coarse()
                ),
            });
        }
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::ShapeMismatch {
                what: "checkpoint".into(),
                detail: format!("unsupported version {}", self.version),
            });
        }
        self.params.validate()?;
        if let Some(momentum) = &self.momentum {
            momentum.0.validate()?;
            if momentum.0.shape() != self.params.net.shape() {
                return Err(Error::ShapeMismatch {
                    what: "checkpoint momentum encoder".into(),
                    detail: format!(
                        "{:?} vs encoder {:?}",
                        momentum.0.shape(),
                        self.params.net.shape()
                    ),
                });
            }
        }
        if let Some(opt) = &self.optimizer {
            let n = self.params.num_params();
            if opt.first_moment.len() != n || opt.second_moment.len() != n {
                return Err(Error::ShapeMismatch {
                    what: "checkpoint optimizer state".into(),
                    detail: format!(
                        "moments of length {}/{} for {n} parameters",
                        opt.first_moment.len(),
                        opt.second_moment.len()
                    ),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_encoder, AdamWConfig};

    #[test]
    fn round_trip_and_shape_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let params = init_encoder(4, &[6], 3, 2, 5).unwrap();
        let mut ckpt = Checkpoint::new(params.clone(), Some(3), "abc");
        ckpt.momentum = Some(MomentumParams::from_encoder(&params));
        ckpt.optimizer = Some(OptimizerState::new(AdamWConfig::default(), params.num_params()));
        ckpt.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert!(Checkpoint::load_expecting(&path, &[4, 6, 3], 2).is_ok());
        assert!(matches!(
            Checkpoint::load_expecting(&path, &[4, 7, 3], 2),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(Checkpoint::load_expecting(&path, &[4, 6, 3], 3).is_err());
    }

    #[test]
    fn corrupted_arrays_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let params = init_encoder(4, &[6], 3, 2, 5).unwrap();
        let mut ckpt = Checkpoint::new(params.clone(), None, "abc");
        ckpt.optimizer = Some(OptimizerState::new(AdamWConfig::default(), 7));
        ckpt.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        let mut broken = params;
        broken.net.layers[0].weights.pop();
        Checkpoint::new(broken, None, "abc").save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
