//! Variance-preserving forward process, exact perturbation-kernel scores and
//! reverse-time integrators.

mod sampler;

pub use sampler::{reverse_step, sample, sample_with, time_grid, SamplerConfig, SamplerKind};

use ndarray::{Array, ArrayBase, Data, Dimension};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Linear-in-time rate `β(t) = β0 + (β1 − β0)·t` on `t ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta_0: f64,
    pub beta_1: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            beta_0: 0.05,
            beta_1: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseStats {
    pub mean_coef: f64,
    pub var: f64,
}

impl NoiseSchedule {
    pub fn new(beta_0: f64, beta_1: f64) -> Result<Self> {
        if !(beta_0 > 0.0 && beta_1 > beta_0 && beta_1.is_finite()) {
            return Err(Error::Domain(format!(
                "noise schedule needs 0 < beta_0 < beta_1, got {beta_0}, {beta_1}"
            )));
        }
        Ok(NoiseSchedule { beta_0, beta_1 })
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_0 + (self.beta_1 - self.beta_0) * t
    }

    /// `B(t) = ∫₀ᵗ β(s) ds`.
    pub fn cumulative(&self, t: f64) -> f64 {
        self.beta_0 * t + 0.5 * (self.beta_1 - self.beta_0) * t * t
    }

    /// Mean coefficient and variance of `X_t | X_0`.
    pub fn noise_stats(&self, t: f64) -> Result<NoiseStats> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        let b = self.cumulative(t);
        Ok(NoiseStats {
            mean_coef: (-0.5 * b).exp(),
            // -expm1 keeps precision for small B
            var: -(-b).exp_m1(),
        })
    }
}

fn check_positive_t(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!("t = {t} outside (0, 1]")));
    }
    Ok(())
}

/// `X_t = mean_coef·X_0 + sqrt(var)·eps` for a given `eps`.
pub fn diffuse_with_noise<S1, S2, D>(
    x0: &ArrayBase<S1, D>,
    eps: &ArrayBase<S2, D>,
    t: f64,
    sched: &NoiseSchedule,
) -> Result<Array<f64, D>>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    check_positive_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Domain("x0 and eps shapes differ".into()));
    }
    let NoiseStats { mean_coef, var } = sched.noise_stats(t)?;
    let sd = var.sqrt();
    let mut out = x0.to_owned();
    out.zip_mut_with(eps, |x, &e| *x = mean_coef * *x + sd * e);
    Ok(out)
}

/// Draws `X_t ~ q(X_t | X_0)`; returns the sample and the noise used.
pub fn forward_sample<S, D, R>(
    x0: &ArrayBase<S, D>,
    t: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Array<f64, D>, Array<f64, D>)>
where
    S: Data<Elem = f64>,
    D: Dimension,
    R: Rng + ?Sized,
{
    check_positive_t(t)?;
    let eps = Array::from_shape_simple_fn(x0.raw_dim(), || rng.sample::<f64, _>(StandardNormal));
    let xt = diffuse_with_noise(x0, &eps, t, sched)?;
    Ok((xt, eps))
}

/// `∇ log N(X_t; mean_coef·X_0, var·I) = −(X_t − mean_coef·X_0)/var`.
pub fn score_target<S1, S2, D>(
    x0: &ArrayBase<S1, D>,
    xt: &ArrayBase<S2, D>,
    t: f64,
    sched: &NoiseSchedule,
) -> Result<Array<f64, D>>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    let NoiseStats { mean_coef, var } = sched.noise_stats(t)?;
    if var == 0.0 {
        return Err(Error::Domain("score target undefined at t = 0".into()));
    }
    if x0.shape() != xt.shape() {
        return Err(Error::Domain("x0 and x_t shapes differ".into()));
    }
    let mut out = xt.to_owned();
    out.zip_mut_with(x0, |x, &x0| *x = -(*x - mean_coef * x0) / var);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stats_at_endpoints() {
        let s = NoiseSchedule::default();
        let z = s.noise_stats(0.0).unwrap();
        assert_eq!((z.mean_coef, z.var), (1.0, 0.0));

        // B(1) = 0.05 + 19.95/2 = 10.025
        let one = s.noise_stats(1.0).unwrap();
        assert!((s.cumulative(1.0) - 10.025).abs() < 1e-12);
        assert!((one.mean_coef - (-5.0125f64).exp()).abs() < 1e-15);
        assert!((one.mean_coef - 6.6542e-3).abs() < 1e-6);
        assert!((one.var - (1.0 - (-10.025f64).exp())).abs() < 1e-15);
        assert!(s.noise_stats(0.3).unwrap().var < s.noise_stats(0.7).unwrap().var);
        assert!(s.noise_stats(-0.1).is_err());
        assert!(s.noise_stats(1.1).is_err());
    }

    #[test]
    fn stats_sum_to_one() {
        let s = NoiseSchedule::default();
        for i in 0..=1000 {
            let st = s.noise_stats(i as f64 / 1000.0).unwrap();
            assert!((st.mean_coef.powi(2) + st.var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_schedules() {
        assert!(NoiseSchedule::new(0.0, 1.0).is_err());
        assert!(NoiseSchedule::new(2.0, 1.0).is_err());
        assert!(NoiseSchedule::new(0.05, 20.0).is_ok());
    }

    #[test]
    fn zero_noise_gives_scaled_mean() {
        let s = NoiseSchedule::default();
        let x0 = array![[1.0, -2.0], [0.5, 3.0]];
        let xt = diffuse_with_noise(&x0, &Array2::zeros((2, 2)), 0.4, &s).unwrap();
        let mc = s.noise_stats(0.4).unwrap().mean_coef;
        assert_eq!(xt, x0.mapv(|v| mc * v));
        assert_eq!(score_target(&x0, &xt, 0.4, &s).unwrap(), Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn target_is_scaled_noise() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Array2::from_shape_fn((4, 5), |(i, j)| (i as f64) - 0.3 * j as f64);
        let (xt, eps) = forward_sample(&x0, 0.6, &s, &mut rng).unwrap();
        let sd = s.noise_stats(0.6).unwrap().var.sqrt();
        let target = score_target(&x0, &xt, 0.6, &s).unwrap();
        for (a, e) in target.iter().zip(eps.iter()) {
            assert!((a + e / sd).abs() < 1e-12 * (1.0 + a.abs()));
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(forward_sample(&x0, 0.6, &s, &mut rng2).unwrap().0, xt);
        assert!(score_target(&x0, &xt, 0.0, &s).is_err());
        assert!(forward_sample(&x0, 0.0, &s, &mut rng).is_err());
    }

    #[test]
    fn target_matches_log_density_gradient() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Array2::from_shape_simple_fn((4, 4), || rng.sample::<f64, _>(StandardNormal));
        let (xt, _) = forward_sample(&x0, 0.35, &s, &mut rng).unwrap();
        let NoiseStats { mean_coef, var } = s.noise_stats(0.35).unwrap();
        let log_density = |x: &Array2<f64>| -> f64 {
            x.iter()
                .zip(x0.iter())
                .map(|(x, m)| -0.5 * (x - mean_coef * m).powi(2) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln())
                .sum()
        };
        let target = score_target(&x0, &xt, 0.35, &s).unwrap();
        let h = 1e-4;
        for idx in 0..16 {
            let (i, j) = (idx / 4, idx % 4);
            let mut plus = xt.clone();
            plus[[i, j]] += h;
            let mut minus = xt.clone();
            minus[[i, j]] -= h;
            let fd = (log_density(&plus) - log_density(&minus)) / (2.0 * h);
            let rel = (fd - target[[i, j]]).abs() / target[[i, j]].abs().max(1e-12);
            assert!(rel < 1e-6, "({i},{j}): fd {fd} vs {}", target[[i, j]]);
        }
    }
}
