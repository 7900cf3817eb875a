//! Parameter groups, Adam, and the finite-difference checking harness.

use crate::error::{Error, Result};
use crate::rng::SeedRng;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One optimizable buffer with its gradient, Adam moments, and schedule.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    /// Per-step exponential learning-rate decay; 1.0 disables it.
    pub gamma: f64,
}

impl ParamGroup {
    pub fn new(name: &str, values: Vec<f64>, lr: f64, gamma: f64) -> Self {
        assert!(gamma > 0.0 && gamma <= 1.0, "gamma must be in (0,1]");
        let n = values.len();
        ParamGroup {
            name: name.to_string(),
            values,
            grads: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            lr,
            gamma,
        }
    }

    pub fn check_grads_finite(&self) -> Result<()> {
        if let Some(idx) = self.grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NaNGradient {
                group: self.name.clone(),
                index: idx,
            });
        }
        Ok(())
    }
}

/// Per-group learning rates of the reference schedule.
#[derive(Clone, Copy, Debug)]
pub struct LearningRates {
    pub mu: f64,
    pub s: f64,
    pub q: f64,
    pub nt: f64,
    pub alpha: f64,
    pub decoder: f64,
    /// Exponential decay applied to the position group each step.
    pub gamma_mu: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            mu: 1.6e-4,
            s: 5e-3,
            q: 1e-3,
            nt: 5e-4,
            alpha: 5e-4,
            decoder: 1e-3,
            gamma_mu: 1.0,
        }
    }
}

impl LearningRates {
    /// Position decay reaching a factor of 0.01 after `total_iters` steps.
    pub fn with_total_iters(mut self, total_iters: u64) -> Self {
        self.gamma_mu = if total_iters > 0 {
            0.01f64.powf(1.0 / total_iters as f64)
        } else {
            1.0
        };
        self
    }
}

/// Textbook Adam with bias correction. Aborts without touching the group if
/// any gradient is non-finite; otherwise updates parameters and moments,
/// zeroes the gradient buffer, then applies the learning-rate decay.
pub fn adam_step(group: &mut ParamGroup, t: u64) -> Result<()> {
    assert!(t >= 1, "Adam iterations are 1-based");
    group.check_grads_finite()?;
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..group.values.len() {
        let g = group.grads[i];
        group.m[i] = BETA1 * group.m[i] + (1.0 - BETA1) * g;
        group.v[i] = BETA2 * group.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = group.m[i] / bc1;
        let v_hat = group.v[i] / bc2;
        group.values[i] -= group.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        group.grads[i] = 0.0;
    }
    group.lr *= group.gamma;
    Ok(())
}

/// Central-difference check of an analytic gradient on randomly probed
/// coordinates. Returns the worst relative error
/// |analytic - fd| / max(1e-8, |analytic| + |fd|).
pub fn fd_check<F: Fn(&[f64]) -> f64>(
    f: F,
    values: &mut [f64],
    analytic: &[f64],
    n_probes: usize,
    rng: &mut SeedRng,
) -> f64 {
    assert_eq!(values.len(), analytic.len());
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..n_probes {
        let idx = rng.index(values.len());
        let orig = values[idx];
        values[idx] = orig + h;
        let fp = f(values);
        values[idx] = orig - h;
        let fm = f(values);
        values[idx] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let rel = (analytic[idx] - fd).abs() / (analytic[idx].abs() + fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::STREAM_CHECK;
    use approx::assert_relative_eq;

    #[test]
    fn zero_gradient_leaves_parameters_decays_moments() {
        let mut g = ParamGroup::new("x", vec![1.0, -2.0], 0.1, 1.0);
        g.grads = vec![0.5, -0.3];
        adam_step(&mut g, 1).unwrap();
        let vals_after_first = g.values.clone();
        let m_before = g.m.clone();
        let v_before = g.v.clone();
        // Second step with zero gradient.
        adam_step(&mut g, 2).unwrap();
        // Moments decayed toward zero; parameters still move along the
        // decayed first moment (momentum), so only moments are asserted.
        for (after, before) in g.m.iter().zip(m_before.iter()) {
            assert_relative_eq!(after, &(before * BETA1), epsilon = 1e-15);
        }
        for (after, before) in g.v.iter().zip(v_before.iter()) {
            assert_relative_eq!(after, &(before * BETA2), epsilon = 1e-15);
        }
        // And with zeroed moments a zero gradient is a true no-op.
        let mut g2 = ParamGroup::new("y", vals_after_first.clone(), 0.1, 1.0);
        adam_step(&mut g2, 1).unwrap();
        assert_eq!(g2.values, vals_after_first);
    }

    #[test]
    fn quadratic_descent_matches_reference_recurrence() {
        // f(x) = x², starting at 1 with lr 0.1.
        let mut g = ParamGroup::new("x", vec![1.0], 0.1, 1.0);
        // Independent reference recurrence; momentum makes |x| wiggle after
        // the first zero crossing, so the envelope rather than per-step
        // monotonicity is asserted.
        let (mut xr, mut mr, mut vr) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100u64 {
            g.grads[0] = 2.0 * g.values[0];
            adam_step(&mut g, t).unwrap();

            let grad = 2.0 * xr;
            mr = 0.9 * mr + 0.1 * grad;
            vr = 0.999 * vr + 0.001 * grad * grad;
            let mh = mr / (1.0 - 0.9f64.powi(t as i32));
            let vh = vr / (1.0 - 0.999f64.powi(t as i32));
            xr -= 0.1 * mh / (vh.sqrt() + 1e-8);

            assert!((g.values[0] - xr).abs() < 1e-12, "diverged at t={t}");
            assert!(g.values[0].abs() <= 1.0 + 1e-12, "left the start envelope");
        }
        assert!(g.values[0].abs() < 0.01, "final |x| = {}", g.values[0].abs());
    }

    #[test]
    fn first_step_closed_form() {
        for &grad in &[0.3, -2.5, 1e-3] {
            let x0 = 0.7;
            let lr = 0.05;
            let mut g = ParamGroup::new("x", vec![x0], lr, 1.0);
            g.grads[0] = grad;
            adam_step(&mut g, 1).unwrap();
            // m̂ = g, v̂ = g² after bias correction at t=1.
            let expected = x0 - lr * grad / (grad.abs() + ADAM_EPS);
            assert!(
                (g.values[0] - expected).abs() < 1e-10,
                "{} vs {expected}",
                g.values[0]
            );
        }
    }

    #[test]
    fn nan_gradient_aborts_step() {
        let mut g = ParamGroup::new("w", vec![1.0, 2.0], 0.1, 1.0);
        g.grads = vec![0.1, f64::NAN];
        let before = g.clone();
        let err = adam_step(&mut g, 1);
        match err {
            Err(Error::NaNGradient { group, index }) => {
                assert_eq!(group, "w");
                assert_eq!(index, 1);
            }
            other => panic!("expected NaNGradient, got {other:?}"),
        }
        assert_eq!(g.values, before.values);
        assert_eq!(g.m, before.m);
    }

    #[test]
    fn gamma_decays_learning_rate() {
        let mut g = ParamGroup::new("mu", vec![0.0], 1e-2, 0.9);
        for t in 1..=10 {
            adam_step(&mut g, t).unwrap();
        }
        assert_relative_eq!(g.lr, 1e-2 * 0.9f64.powi(10), epsilon = 1e-15);
    }

    #[test]
    fn gamma_from_total_iters() {
        let lrs = LearningRates::default().with_total_iters(5000);
        assert_relative_eq!(lrs.gamma_mu.powi(5000), 0.01, epsilon = 1e-12);
    }

    #[test]
    fn fd_check_quadratic() {
        let mut rng = SeedRng::new(10, STREAM_CHECK);
        let mut x: Vec<f64> = (0..20).map(|i| (i as f64) * 0.1 - 1.0).collect();
        let analytic = x.clone(); // grad of 0.5‖x‖² is x
        let err = fd_check(
            |v| 0.5 * v.iter().map(|a| a * a).sum::<f64>(),
            &mut x,
            &analytic,
            20,
            &mut rng,
        );
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn fd_check_linear_exact() {
        let mut rng = SeedRng::new(11, STREAM_CHECK);
        let w: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut x = vec![0.25; 10];
        let analytic = w.clone();
        let wc = w.clone();
        let err = fd_check(
            move |v| v.iter().zip(wc.iter()).map(|(a, b)| a * b).sum::<f64>(),
            &mut x,
            &analytic,
            10,
            &mut rng,
        );
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn fd_check_detects_scaled_gradient() {
        let mut rng = SeedRng::new(12, STREAM_CHECK);
        let mut x = vec![1.0, 2.0, -0.5];
        // 1.1× too large: rel err = 0.1/(1.1 + 1.0) ≈ 0.047619.
        let wrong: Vec<f64> = x.iter().map(|a| 1.1 * a).collect();
        let err = fd_check(
            |v| 0.5 * v.iter().map(|a| a * a).sum::<f64>(),
            &mut x,
            &wrong,
            12,
            &mut rng,
        );
        assert!((err - 0.1 / 2.1).abs() < 1e-3, "rel err {err}");
    }
}
