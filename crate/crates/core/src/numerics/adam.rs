use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Step-decayed learning rate: `initial · decay^floor(iteration / interval)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub interval: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.001,
            decay: 0.9,
            interval: 24_000,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, iteration: u64) -> f64 {
        let periods = iteration / self.interval.max(1);
        self.initial * self.decay.powi(periods.min(i32::MAX as u64) as i32)
    }
}

/// One bias-corrected Adam update on a flat slice.
///
/// `step` is the 1-based step count used for bias correction. Shared by the
/// dense optimizer and the per-row optimizer of embedding tables.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    step: u64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Adam moments for a list of dense tensors.
///
/// A tensor whose gradient is exactly zero everywhere is skipped: neither the
/// parameter nor its moments move. This matches the lazy semantics used for
/// embedding rows, so an absent gradient and a zero gradient behave alike.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        Self {
            config,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    /// Applies one step to `params`. On a non-finite gradient nothing changes.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            adam_update(
                p.data_mut(),
                g.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                lr,
                self.step,
                &self.config,
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = LrSchedule::default();
        assert_eq!(s.at(0), 0.001);
        assert_eq!(s.at(23_999), 0.001);
        assert!((s.at(24_000) - 0.0009).abs() < 1e-18);
        assert!((s.at(48_000) - 0.00081).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_on_fresh_state_is_a_no_op() {
        let mut p = vec![Tensor::vector(vec![0.5, -1.5])];
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.step(&mut p, &[Tensor::zeros(&[2])], 0.001).unwrap();
        assert!(p[0].bit_eq(&before[0]));
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![Tensor::vector(vec![0.0, 0.0, 0.0])];
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.step(&mut p, &[Tensor::vector(vec![3.0, -0.02, 1e3])], 0.001)
            .unwrap();
        for (x, s) in p[0].data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 0.001).abs() < 1e-9, "{x}");
        }
    }

    #[test]
    fn two_unit_gradient_steps() {
        // Hand-iterated: both bias-corrected steps have m̂ = v̂ = 1, so each
        // moves by lr / (1 + ε).
        let mut p = vec![Tensor::vector(vec![1.0])];
        let mut st = AdamState::new(&p, AdamConfig::default());
        for _ in 0..2 {
            st.step(&mut p, &[Tensor::vector(vec![1.0])], 0.001).unwrap();
        }
        let expected = 1.0 - 2.0 * 0.001 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-12);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn non_finite_gradient_leaves_parameter_untouched() {
        let mut p = vec![Tensor::vector(vec![0.25])];
        let mut st = AdamState::new(&p, AdamConfig::default());
        let err = st.step(&mut p, &[Tensor::vector(vec![f64::NAN])], 0.001);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p[0].data(), &[0.25]);
        assert_eq!(st.step, 0);
    }
}
