//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// Moment estimates for a fixed, ordered list of parameter slices.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    /// One update `θ ← θ − α·m̂/(√v̂ + ε)`. `params[i]` is `(name, values)`
    /// and `grads[i]` must match it in length. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [(String, &mut [T])], grads: &[&[T]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((name, p), g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::shape("adam gradient", format!("{} values for {name}", p.len()), &[g.len()]));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let (b1, b2, eps) = (T::from_f64(beta1), T::from_f64(beta2), T::from_f64(epsilon));
        let c1 = T::from_f64(1.0 - beta1.powi(self.t.min(i32::MAX as u64) as i32));
        let c2 = T::from_f64(1.0 - beta2.powi(self.t.min(i32::MAX as u64) as i32));
        let lr = T::from_f64(lr);
        let one = T::one();
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                let m_hat = if c1 > T::zero() { m[k] / c1 } else { m[k] };
                let v_hat = if c2 > T::zero() { v[k] / c2 } else { v[k] };
                p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *v = *v * s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(theta: &mut Vec<f64>, state: &mut AdamState<f64>, g: &[f64], lr: f64) {
        let mut params = vec![("p".to_string(), theta.as_mut_slice())];
        state.step(&mut params, &[g], lr).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut theta = vec![0.5, -1.0];
        let mut s = AdamState::new(AdamConfig::default(), &[2]);
        run(&mut theta, &mut s, &[0.0, 0.0], 1e-3);
        assert_eq!(theta, vec![0.5, -1.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_matches_reference() {
        let g = [0.3, -2.0, 1e-3];
        let mut theta = vec![1.0, 1.0, 1.0];
        let mut s = AdamState::new(AdamConfig::default(), &[3]);
        run(&mut theta, &mut s, &g, 1e-3);
        for (t, gk) in theta.iter().zip(g) {
            // m̂ = g and v̂ = g² after one corrected step
            let m = 0.1 * gk / 0.1;
            let v = 0.001 * gk * gk / 0.001;
            let want = 1.0 - 1e-3 * m / (f64::sqrt(v) + 1e-8);
            assert!((t - want).abs() < 1e-15, "{t} vs {want}");
            assert!(((1.0 - t).abs() - 1e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn identical_states_give_identical_updates() {
        let mut a = vec![0.1, 0.2];
        let mut b = a.clone();
        let mut sa = AdamState::new(AdamConfig::default(), &[2]);
        let mut sb = sa.clone();
        for _ in 0..3 {
            run(&mut a, &mut sa, &[0.7, -0.2], 1e-2);
            run(&mut b, &mut sb, &[0.7, -0.2], 1e-2);
        }
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(sa, sb);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut theta = vec![0.0];
        let mut s = AdamState::new(AdamConfig::default(), &[1]);
        let mut params = vec![("head.mu".to_string(), theta.as_mut_slice())];
        let err = s.step(&mut params, &[&[f64::NAN]], 1e-3).unwrap_err();
        assert!(err.to_string().contains("head.mu"));
        assert_eq!(s.t, 0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[1][0] - 0.8).abs() < 1e-12);
    }
}
