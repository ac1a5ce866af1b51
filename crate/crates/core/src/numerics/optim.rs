//! Adam and LAMB with a linear warmup / linear decay schedule.

use serde::{Deserialize, Serialize};

use super::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};

/// Upper clamp on the LAMB trust ratio.
pub const MAX_TRUST_RATIO: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Lamb,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "lamb" => Ok(Self::Lamb),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (adam|lamb)"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Lamb => "lamb",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Step at which the learning rate reaches zero; `0` disables decay.
    pub total_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Lamb,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
            warmup_steps: 0,
            total_steps: 0,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate applied by the update taken at `step` (0-based): a
    /// linear ramp reaching the peak on the last warmup update, then linear
    /// decay to 0 at `total_steps`. No update inside the run gets a zero
    /// rate.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps == 0 {
            return self.lr;
        }
        if self.total_steps <= self.warmup_steps || step >= self.total_steps {
            return if step >= self.total_steps { 0.0 } else { self.lr };
        }
        self.lr * (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64
    }
}

/// Moments and step counter for one optimizer run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub first_moment: ParamSet<T>,
    pub second_moment: ParamSet<T>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, params: &ParamSet<T>) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }

    /// Forgets the moments and restarts the step counter.
    pub fn reset(&mut self, config: OptimizerConfig) {
        self.config = config;
        self.step = 0;
        self.first_moment = self.first_moment.zeros_like();
        self.second_moment = self.second_moment.zeros_like();
    }
}

/// Applies one Adam or LAMB update in place.
///
/// All gradients are validated before any parameter changes, so a
/// non-finite gradient leaves `params` and `state` untouched.
pub fn optimizer_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter {name}")))?;
        let m = state.first_moment.require(name)?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::dim("optimizer_step", p.shape(), g.shape()));
        }
        if let Some(index) = g.first_non_finite() {
            return Err(Error::NonFinite {
                op: format!("gradient of {name}"),
                index,
            });
        }
    }

    let cfg = state.config.clone();
    let lr = cfg.lr_at(state.step);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("validated");
        let m = state.first_moment.get_mut(name).expect("validated");
        let v = state.second_moment.get_mut(name).expect("validated");
        let mut update = vec![0.0f64; p.len()];
        for (i, u) in update.iter_mut().enumerate() {
            let gi = g.data()[i].f64();
            let mi = cfg.beta1 * m.data()[i].f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i].f64() + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = T::of(mi);
            v.data_mut()[i] = T::of(vi);
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *u = m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p.data()[i].f64();
        }
        let ratio = match cfg.kind {
            OptimizerKind::Adam => 1.0,
            OptimizerKind::Lamb => trust_ratio(p, &update),
        };
        let step = lr * ratio;
        for (w, u) in p.data_mut().iter_mut().zip(&update) {
            *w = T::of(w.f64() - step * u);
        }
    }
    state.step += 1;
    Ok(())
}

/// `‖w‖ / ‖update‖` clamped to `[0, MAX_TRUST_RATIO]`, or 1 when either
/// norm is zero.
fn trust_ratio<T: Real>(w: &Tensor<T>, update: &[f64]) -> f64 {
    let w_norm = w.norm();
    let u_norm = update.iter().map(|u| u * u).sum::<f64>().sqrt();
    if w_norm == 0.0 || u_norm == 0.0 {
        1.0
    } else {
        (w_norm / u_norm).clamp(0.0, MAX_TRUST_RATIO)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(w));
        p
    }

    #[test]
    fn lamb_first_step_on_unit_weight() {
        let mut params = single(1.0);
        let grads = single(1.0);
        let mut state = OptimizerState::new(OptimizerConfig::default(), &params);
        optimizer_step(&mut params, &grads, &mut state).unwrap();
        let w = params.get("w").unwrap().item();
        assert!((w - 0.999).abs() < 1e-12, "{w}");
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_weights_unchanged() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Lamb] {
            let mut params = single(0.25);
            let grads = single(0.0);
            let cfg = OptimizerConfig {
                kind,
                ..Default::default()
            };
            let mut state = OptimizerState::new(cfg, &params);
            for _ in 0..3 {
                optimizer_step(&mut params, &grads, &mut state).unwrap();
            }
            assert_eq!(params.get("w").unwrap().item(), 0.25);
        }
    }

    #[test]
    fn warmup_ramps_up_and_decays_to_zero() {
        let cfg = OptimizerConfig {
            warmup_steps: 10,
            total_steps: 30,
            ..Default::default()
        };
        assert!((cfg.lr_at(0) - 1e-4).abs() < 1e-15);
        assert!((cfg.lr_at(4) - 5e-4).abs() < 1e-15);
        assert_eq!(cfg.lr_at(9), 1e-3);
        assert_eq!(cfg.lr_at(10), 1e-3);
        assert!((cfg.lr_at(20) - 5e-4).abs() < 1e-15);
        assert_eq!(cfg.lr_at(30), 0.0);
        assert_eq!(cfg.lr_at(31), 0.0);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut params = single(1.0);
        let grads = single(f64::NAN);
        let mut state = OptimizerState::new(OptimizerConfig::default(), &params);
        let err = optimizer_step(&mut params, &grads, &mut state).unwrap_err();
        assert!(err.to_string().contains("gradient of w"));
        assert_eq!(params.get("w").unwrap().item(), 1.0);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn trust_ratio_is_clamped() {
        let w = Tensor::<f64>::from_f64(&[1], &[1000.0]).unwrap();
        assert_eq!(trust_ratio(&w, &[1.0]), MAX_TRUST_RATIO);
        assert_eq!(trust_ratio(&w, &[0.0]), 1.0);
    }
}
