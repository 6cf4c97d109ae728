use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecmath;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            weight_decay: 0.01,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators and step counter, laid out like the flat parameter
/// vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        OptimizerState {
            config,
            step: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
        }
    }

    pub fn num_params(&self) -> usize {
        self.first_moment.len()
    }
}

/// AdamW with decoupled weight decay and global-norm gradient clipping.
///
/// `no_decay[i]` exempts entry `i` from weight decay; `frozen[i]` leaves
/// entry `i` untouched altogether (its moments stay at zero).
#[derive(Debug, Clone)]
pub struct AdamW {
    no_decay: Vec<bool>,
    frozen: Vec<bool>,
}

impl AdamW {
    pub fn new(no_decay: Vec<bool>, frozen: Vec<bool>) -> Result<Self> {
        if no_decay.len() != frozen.len() {
            return Err(Error::DimensionMismatch {
                expected: no_decay.len(),
                actual: frozen.len(),
            });
        }
        Ok(AdamW { no_decay, frozen })
    }

    pub fn unmasked(num_params: usize) -> Self {
        AdamW {
            no_decay: vec![false; num_params],
            frozen: vec![false; num_params],
        }
    }

    /// Scales `grads` in place so that their global norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip(grads: &mut [f64], max_norm: f64) -> f64 {
        let total = vecmath::norm(grads);
        if max_norm > 0.0 && total > max_norm {
            let scale = max_norm / total;
            grads.iter_mut().for_each(|g| *g *= scale);
        }
        total
    }

    /// One optimizer step. Frozen entries are excluded from the clip norm.
    pub fn step(&self, params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
        let n = params.len();
        for (what, len) in [
            ("gradients", grads.len()),
            ("first moment", state.first_moment.len()),
            ("second moment", state.second_moment.len()),
            ("optimizer mask", self.frozen.len()),
        ] {
            if len != n {
                return Err(Error::ShapeMismatch {
                    what: what.into(),
                    detail: format!("{len} entries for {n} parameters"),
                });
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::non_finite("gradients"));
        }

        let mut g: Vec<f64> = grads
            .iter()
            .zip(&self.frozen)
            .map(|(&g, &frozen)| if frozen { 0.0 } else { g })
            .collect();
        let cfg = state.config;
        Self::clip(&mut g, cfg.clip_norm);

        state.step += 1;
        let t = state.step as f64;
        let bias1 = 1.0 - cfg.beta1.powf(t);
        let bias2 = 1.0 - cfg.beta2.powf(t);
        for i in 0..n {
            if self.frozen[i] {
                continue;
            }
            if !self.no_decay[i] {
                params[i] -= cfg.lr * cfg.weight_decay * params[i];
            }
            let m = &mut state.first_moment[i];
            let v = &mut state.second_moment[i];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g[i];
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::non_finite("parameters after optimizer step"));
        }
        Ok(())
    }
}
