use serde::{Deserialize, Serialize};

use super::params::ParameterBundle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected adaptive-moment step over every array in the bundle.
/// Moments live in the bundle, so successive calls continue the same run.
pub fn optimizer_step(bundle: &mut ParameterBundle, cfg: &AdamConfig) {
    bundle.step += 1;
    let t = bundle.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..bundle.values.len() {
        let g = bundle.grads[i].as_slice().expect("standard layout");
        let m = bundle.m[i].as_slice_mut().expect("standard layout");
        let v = bundle.v[i].as_slice_mut().expect("standard layout");
        let w = bundle.values[i].as_slice_mut().expect("standard layout");
        for k in 0..g.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            w[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_bundle(x: f64) -> ParameterBundle {
        let mut b = ParameterBundle::new();
        b.add("x", array![[x]]);
        b
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut b = scalar_bundle(1.5);
        optimizer_step(&mut b, &AdamConfig::default());
        assert_eq!(b.values[0][[0, 0]], 1.5);
    }

    #[test]
    fn unit_gradient_first_step() {
        let mut b = scalar_bundle(0.0);
        b.grads[0].fill(1.0);
        optimizer_step(&mut b, &AdamConfig::with_lr(0.001));
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        assert!((b.values[0][[0, 0]] + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
        optimizer_step(&mut b, &AdamConfig::with_lr(0.001));
        assert!((b.values[0][[0, 0]] + 0.002).abs() < 1e-10);
        assert_eq!(b.step, 2);
    }

    #[test]
    fn identical_inputs_identical_results() {
        let mut a = scalar_bundle(0.3);
        let mut b = scalar_bundle(0.3);
        for k in 0..5 {
            a.grads[0].fill(k as f64 - 2.0);
            b.grads[0].fill(k as f64 - 2.0);
            optimizer_step(&mut a, &AdamConfig::default());
            optimizer_step(&mut b, &AdamConfig::default());
        }
        assert_eq!(a, b);
    }
}
