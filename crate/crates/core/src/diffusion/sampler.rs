use ndarray::{Array, Array3, ArrayBase, Axis, Data, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::audiofeat::MelSpectrogram;
use crate::guidance::{evaluate_triples, guided_score, GuidanceConfig, ScoreSource};
use crate::labelkit::FrameConditions;
use crate::model::ScoreModel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Sde,
    Ode,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Sde => "sde",
            SamplerKind::Ode => "ode",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub kind: SamplerKind,
    pub seed: u64,
    /// Final time of the uniform grid.
    pub t_min: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_steps: 200,
            kind: SamplerKind::Sde,
            seed: 0,
            t_min: 1e-4,
        }
    }
}

/// `(t, dt)` pairs of the uniform grid from 1 down to `t_min`.
pub fn time_grid(n_steps: usize, t_min: f64) -> Result<Vec<(f64, f64)>> {
    if n_steps == 0 {
        return Err(Error::Domain("sampler needs at least one step".into()));
    }
    if !(0.0..1.0).contains(&t_min) {
        return Err(Error::Domain(format!("t_min = {t_min} outside [0, 1)")));
    }
    let dt = (1.0 - t_min) / n_steps as f64;
    Ok((0..n_steps).map(|k| (1.0 - k as f64 * dt, dt)).collect())
}

/// One Euler(-Maruyama) step of the reverse-time VP process, `t → t − dt`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<S1, S2, D, R>(
    x: &ArrayBase<S1, D>,
    score: &ArrayBase<S2, D>,
    t: f64,
    dt: f64,
    kind: SamplerKind,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array<f64, D>>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
    R: Rng + ?Sized,
{
    if !(dt > 0.0 && dt <= t + 1e-12) {
        return Err(Error::Domain(format!("need 0 < dt <= t, got dt = {dt}, t = {t}")));
    }
    if x.shape() != score.shape() {
        return Err(Error::Domain("score shape differs from state".into()));
    }
    let beta_dt = sched.beta(t) * dt;
    let mut out = x.to_owned();
    match kind {
        SamplerKind::Sde => {
            let sd = beta_dt.sqrt();
            out.zip_mut_with(score, |x, &s| {
                let z: f64 = rng.sample(StandardNormal);
                *x += (0.5 * *x + s) * beta_dt + sd * z;
            });
        }
        SamplerKind::Ode => out.zip_mut_with(score, |x, &s| *x += (*x + s) * 0.5 * beta_dt),
    }
    Ok(out)
}

/// Guided reverse-time sampling for a batch of equal-length conditions.
///
/// Returns `(B, n_rows, T)` states at `t = t_min`.
pub fn sample_with<S: ScoreSource + ?Sized>(
    conds: &[FrameConditions],
    n_rows: usize,
    guidance: &GuidanceConfig,
    sc: &SamplerConfig,
    sched: &NoiseSchedule,
    source: &S,
) -> Result<Array3<f64>> {
    let Some(first) = conds.first() else {
        return Err(Error::Domain("nothing to sample".into()));
    };
    let n_frames = first.n_frames();
    if n_frames == 0 || conds.iter().any(|c| c.n_frames() != n_frames) {
        return Err(Error::Domain("batched conditions must share a nonzero length".into()));
    }
    guidance.validate()?;
    let grid = time_grid(sc.n_steps, sc.t_min)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut x = Array3::from_shape_simple_fn((conds.len(), n_rows, n_frames), || {
        rng.sample::<f64, _>(StandardNormal)
    });
    for (t, dt) in grid {
        let triples = evaluate_triples(&x, conds, t, source, guidance.mode)?;
        let mut score = Array3::zeros(x.raw_dim());
        for (mut dst, triple) in score.axis_iter_mut(Axis(0)).zip(&triples) {
            dst.assign(&guided_score(triple, guidance)?);
        }
        x = reverse_step(&x, &score, t, dt, sc.kind, sched, &mut rng)?;
    }
    Ok(x)
}

/// Samples one mel-spectrogram from a trained model.
pub fn sample(
    fc: &FrameConditions,
    guidance: &GuidanceConfig,
    sc: &SamplerConfig,
    model: &ScoreModel,
) -> Result<MelSpectrogram> {
    let cfg = model.config();
    let x = sample_with(
        std::slice::from_ref(fc),
        cfg.n_mels,
        guidance,
        sc,
        &cfg.schedule,
        model,
    )?;
    Ok(model.config().denormalize(x.index_axis(Axis(0), 0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn grid_is_uniform() {
        let g = time_grid(4, 0.2).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g[0], (1.0, 0.2));
        assert!((g[3].0 - g[3].1 - 0.2).abs() < 1e-12);
        assert_eq!(time_grid(200, 1e-4).unwrap().len(), 200);
        assert!(time_grid(0, 1e-4).is_err());
    }

    #[test]
    fn ode_stationary_under_standard_normal_score() {
        let sched = NoiseSchedule::default();
        let x = array![[0.3, -1.2], [2.0, 0.1]];
        let s = x.mapv(|v| -v);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let next = reverse_step(&x, &s, 0.5, 0.01, SamplerKind::Ode, &sched, &mut rng).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn ode_is_deterministic_and_sde_seeded() {
        let sched = NoiseSchedule::default();
        let x = Array2::from_elem((3, 3), 0.7);
        let s = Array2::from_elem((3, 3), -0.2);
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(99);
        let o1 = reverse_step(&x, &s, 0.8, 0.1, SamplerKind::Ode, &sched, &mut a).unwrap();
        let o2 = reverse_step(&x, &s, 0.8, 0.1, SamplerKind::Ode, &sched, &mut b).unwrap();
        assert_eq!(o1, o2);
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let s1 = reverse_step(&x, &s, 0.8, 0.1, SamplerKind::Sde, &sched, &mut a).unwrap();
        let s2 = reverse_step(&x, &s, 0.8, 0.1, SamplerKind::Sde, &sched, &mut b).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1, o1);
        assert!(reverse_step(&x, &s, 0.05, 0.1, SamplerKind::Ode, &sched, &mut a).is_err());
    }
}
