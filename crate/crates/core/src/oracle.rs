//! Discrete-label Gaussian mixture with closed-form diffused scores.
//!
//! Component `(m, c)` is `N(μ_{m,c}, σ²I)` with prior weight `p(m, c)`.
//! Under the VP kernel each component stays Gaussian with mean
//! `mean_coef(t)·μ` and variance `mean_coef(t)²·σ² + var(t)`, so every
//! conditional and marginal score is an exact softmax-weighted average of
//! component scores.

use ndarray::{Array1, Array3, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::NoiseSchedule;
use crate::guidance::{guided_score, GuidanceConfig, GuidanceMode, ScoreSource, ScoreTriple};
use crate::labelkit::{FrameConditions, PHONEME_UNKNOWN, PITCH_UNKNOWN};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureOracle {
    pub dim: usize,
    /// `p(m, c)`, row-major `n_pitch × n_text`.
    pub prior: Vec<Vec<f64>>,
    /// `means[m][c]` has length `dim`.
    pub means: Vec<Vec<Array1<f64>>>,
    pub sigma2: f64,
    pub schedule: NoiseSchedule,
}

/// Which labels the density is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleCondition {
    Full { pitch: usize, text: usize },
    PitchOnly { pitch: usize },
    TextOnly { text: usize },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentStats {
    pub mean_coef: f64,
    pub var: f64,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl MixtureOracle {
    pub fn new(prior: Vec<Vec<f64>>, means: Vec<Vec<Array1<f64>>>, sigma2: f64, schedule: NoiseSchedule) -> Result<Self> {
        let n_pitch = prior.len();
        let n_text = prior.first().map_or(0, Vec::len);
        if n_pitch == 0 || n_text == 0 || prior.iter().any(|r| r.len() != n_text) {
            return Err(Error::Domain("prior must be a non-empty rectangular matrix".into()));
        }
        let total: f64 = prior.iter().flatten().sum();
        if prior.iter().flatten().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("prior must be a simplex, sums to {total}")));
        }
        if !(sigma2 > 0.0) {
            return Err(Error::Domain("sigma2 must be positive".into()));
        }
        if means.len() != n_pitch || means.iter().any(|r| r.len() != n_text) {
            return Err(Error::Domain("means must match prior shape".into()));
        }
        let dim = means[0][0].len();
        if means.iter().flatten().any(|m| m.len() != dim) || dim == 0 {
            return Err(Error::Domain("means must share a nonzero dimension".into()));
        }
        Ok(MixtureOracle { dim, prior, means, sigma2, schedule })
    }

    /// The 2×2-label oracle in two dimensions used across the test suite.
    pub fn default_2x2() -> Self {
        let m = |a: f64, b: f64| Array1::from(vec![a, b]);
        MixtureOracle::new(
            vec![vec![0.4, 0.1], vec![0.2, 0.3]],
            vec![vec![m(-2.0, -2.0), m(-2.0, 2.0)], vec![m(2.0, -2.0), m(2.0, 2.0)]],
            0.25,
            NoiseSchedule::default(),
        )
        .expect("valid default oracle")
    }

    /// Single component: every condition variant has the same density.
    pub fn single_component(dim: usize, sigma2: f64) -> Self {
        MixtureOracle::new(vec![vec![1.0]], vec![vec![Array1::zeros(dim)]], sigma2, NoiseSchedule::default())
            .expect("valid single-component oracle")
    }

    pub fn n_pitch(&self) -> usize {
        self.prior.len()
    }

    pub fn n_text(&self) -> usize {
        self.prior[0].len()
    }

    /// Shared mean scale and variance of every component at time `t`.
    pub fn diffused_component_stats(&self, t: f64) -> Result<ComponentStats> {
        let s = self.schedule.noise_stats(t)?;
        Ok(ComponentStats {
            mean_coef: s.mean_coef,
            var: s.mean_coef * s.mean_coef * self.sigma2 + s.var,
        })
    }

    /// Diffused mean of component `(m, c)`.
    pub fn component_mean(&self, pitch: usize, text: usize, t: f64) -> Result<Array1<f64>> {
        let st = self.diffused_component_stats(t)?;
        Ok(&self.means[pitch][text] * st.mean_coef)
    }

    /// Components `(m, c, log weight)` contributing to a condition.
    fn components(&self, cond: OracleCondition) -> Result<Vec<(usize, usize, f64)>> {
        let (np, nt) = (self.n_pitch(), self.n_text());
        let check = |v: usize, n: usize| {
            if v < n {
                Ok(())
            } else {
                Err(Error::Domain(format!("label {v} outside 0..{n}")))
            }
        };
        let cells: Vec<(usize, usize)> = match cond {
            OracleCondition::Full { pitch, text } => {
                check(pitch, np)?;
                check(text, nt)?;
                return Ok(vec![(pitch, text, 0.0)]);
            }
            OracleCondition::PitchOnly { pitch } => {
                check(pitch, np)?;
                (0..nt).map(|c| (pitch, c)).collect()
            }
            OracleCondition::TextOnly { text } => {
                check(text, nt)?;
                (0..np).map(|m| (m, text)).collect()
            }
            OracleCondition::None => (0..np).flat_map(|m| (0..nt).map(move |c| (m, c))).collect(),
        };
        let total: f64 = cells.iter().map(|&(m, c)| self.prior[m][c]).sum();
        if total <= 0.0 {
            return Err(Error::Domain("condition has zero prior mass".into()));
        }
        Ok(cells
            .into_iter()
            .filter(|&(m, c)| self.prior[m][c] > 0.0)
            .map(|(m, c)| (m, c, (self.prior[m][c] / total).ln()))
            .collect())
    }

    fn component_log_density(&self, x: ArrayView1<f64>, pitch: usize, text: usize, st: ComponentStats) -> f64 {
        let sq: f64 = x
            .iter()
            .zip(self.means[pitch][text].iter())
            .map(|(x, mu)| (x - st.mean_coef * mu).powi(2))
            .sum();
        -0.5 * sq / st.var - 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI * st.var).ln()
    }

    /// `log p_t(x | condition)`.
    pub fn log_density(&self, x: ArrayView1<f64>, t: f64, cond: OracleCondition) -> Result<f64> {
        self.check_dim(x)?;
        let st = self.diffused_component_stats(t)?;
        let terms: Vec<f64> = self
            .components(cond)?
            .into_iter()
            .map(|(m, c, lw)| lw + self.component_log_density(x, m, c, st))
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// `∇_x log p_t(x | condition)`.
    pub fn score(&self, x: ArrayView1<f64>, t: f64, cond: OracleCondition) -> Result<Array1<f64>> {
        self.check_dim(x)?;
        let st = self.diffused_component_stats(t)?;
        let comps = self.components(cond)?;
        let logs: Vec<f64> = comps
            .iter()
            .map(|&(m, c, lw)| lw + self.component_log_density(x, m, c, st))
            .collect();
        let norm = log_sum_exp(&logs);
        let mut out = Array1::zeros(self.dim);
        for (&(m, c, _), l) in comps.iter().zip(&logs) {
            let r = (l - norm).exp();
            for (o, (xi, mu)) in out.iter_mut().zip(x.iter().zip(self.means[m][c].iter())) {
                *o -= r * (xi - st.mean_coef * mu) / st.var;
            }
        }
        Ok(out)
    }

    /// `log p_t(m, c | x)`.
    pub fn log_posterior(&self, x: ArrayView1<f64>, t: f64, pitch: usize, text: usize) -> Result<f64> {
        let prior = self.prior[pitch][text];
        Ok(prior.ln() + self.log_density(x, t, OracleCondition::Full { pitch, text })? - self.log_density(x, t, OracleCondition::None)?)
    }

    fn check_dim(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Domain(format!("point has {} dims, oracle has {}", x.len(), self.dim)));
        }
        Ok(())
    }

    /// Exact draw from component `(m, c)` at `t = 0`.
    pub fn sample_component<R: Rng + ?Sized>(&self, pitch: usize, text: usize, rng: &mut R) -> Array1<f64> {
        let sd = self.sigma2.sqrt();
        self.means[pitch][text].mapv(|mu| mu + sd * rng.sample::<f64, _>(StandardNormal))
    }

    fn draw_point<R: Rng>(&self, rng: &mut R) -> (Array1<f64>, f64) {
        // points near the diffused data, away from t = 0 where var(t) vanishes
        let t = rng.random_range(0.01..1.0);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut cell = (0, 0);
        'outer: for (m, row) in self.prior.iter().enumerate() {
            for (c, &p) in row.iter().enumerate() {
                acc += p;
                cell = (m, c);
                if u < acc {
                    break 'outer;
                }
            }
        }
        let x0 = self.sample_component(cell.0, cell.1, rng);
        let st = self.schedule.noise_stats(t).expect("t in range");
        let x = x0.mapv(|v| st.mean_coef * v + st.var.sqrt() * rng.sample::<f64, _>(StandardNormal));
        (x, t)
    }

    /// Checks the guidance identities at random points.
    pub fn verify_guidance_identities(&self, n_points: usize, seed: u64) -> Result<ResidualReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = ResidualReport { n_points, ..Default::default() };
        let h = 1e-4;
        for _ in 0..n_points {
            let (x, t) = self.draw_point(&mut rng);
            let pitch = rng.random_range(0..self.n_pitch());
            let text = rng.random_range(0..self.n_text());
            if self.prior[pitch][text] == 0.0 {
                continue;
            }
            let full = self.score(x.view(), t, OracleCondition::Full { pitch, text })?;
            let pitch_only = self.score(x.view(), t, OracleCondition::PitchOnly { pitch })?;
            let uncond = self.score(x.view(), t, OracleCondition::None)?;

            // (a) telescoping
            let tele = (&full - &pitch_only) + (&pitch_only - &uncond) - (&full - &uncond);
            report.telescoping = report.telescoping.max(tele.iter().fold(0.0f64, |a, v| a.max(v.abs())));

            // (b) dual with w1 = w2 against single
            let w = rng.random_range(0.0..2.0);
            let as_matrix = |v: &Array1<f64>| v.clone().insert_axis(Axis(1));
            let triple = ScoreTriple {
                full: as_matrix(&full),
                pitch_only: Some(as_matrix(&pitch_only)),
                uncond: Some(as_matrix(&uncond)),
                text_only: None,
            };
            let plain = |mode, w1, w2| GuidanceConfig { mode, w1, w2, norm_based: false, eps_norm: 1e-8 };
            let dual = guided_score(&triple, &plain(GuidanceMode::DualPitchAnchored, w, w))?;
            let single = guided_score(&triple, &plain(GuidanceMode::Single, w, 0.0))?;
            let diff = dual.iter().zip(single.iter()).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
            report.single_vs_dual = report.single_vs_dual.max(diff);

            // (c) Bayes: analytic guidance gradient vs finite differences
            let analytic = &full - &uncond;
            let mut fd = Array1::zeros(self.dim);
            for i in 0..self.dim {
                let mut plus = x.clone();
                plus[i] += h;
                let mut minus = x.clone();
                minus[i] -= h;
                fd[i] = (self.log_posterior(plus.view(), t, pitch, text)? - self.log_posterior(minus.view(), t, pitch, text)?)
                    / (2.0 * h);
            }
            let err = (&analytic - &fd).iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = analytic.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
            report.bayes = report.bayes.max(err / scale);

            // marginalization: p(x|m) = Σ_c p(c|m) p(x|m,c)
            let lhs = self.log_density(x.view(), t, OracleCondition::PitchOnly { pitch })?;
            let row: f64 = self.prior[pitch].iter().sum();
            let terms: Vec<f64> = (0..self.n_text())
                .filter(|&c| self.prior[pitch][c] > 0.0)
                .map(|c| {
                    Ok((self.prior[pitch][c] / row).ln() + self.log_density(x.view(), t, OracleCondition::Full { pitch, text: c })?)
                })
                .collect::<Result<_>>()?;
            report.marginalization = report.marginalization.max((lhs - log_sum_exp(&terms)).abs());
        }
        Ok(report)
    }
}

/// Maximum residuals of [`MixtureOracle::verify_guidance_identities`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ResidualReport {
    pub n_points: usize,
    pub telescoping: f64,
    pub single_vs_dual: f64,
    /// Relative error, floored at unit gradient norm.
    pub bayes: f64,
    /// Log-domain.
    pub marginalization: f64,
}

impl ResidualReport {
    pub const TELESCOPING_TOL: f64 = 1e-12;
    pub const SINGLE_VS_DUAL_TOL: f64 = 1e-12;
    pub const BAYES_TOL: f64 = 1e-6;
    pub const MARGINALIZATION_TOL: f64 = 1e-12;

    pub fn passed(&self) -> bool {
        self.telescoping <= Self::TELESCOPING_TOL
            && self.single_vs_dual <= Self::SINGLE_VS_DUAL_TOL
            && self.bayes <= Self::BAYES_TOL
            && self.marginalization <= Self::MARGINALIZATION_TOL
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let status = |v: f64, tol: f64| if v <= tol { "pass" } else { "FAIL" };
        format!(
            "n_points={}\ntelescoping_max={:e}\ntelescoping_status={}\nsingle_vs_dual_max={:e}\nsingle_vs_dual_status={}\nbayes_rel_max={:e}\nbayes_status={}\nmarginalization_max={:e}\nmarginalization_status={}\npassed={}\n",
            self.n_points,
            self.telescoping,
            status(self.telescoping, Self::TELESCOPING_TOL),
            self.single_vs_dual,
            status(self.single_vs_dual, Self::SINGLE_VS_DUAL_TOL),
            self.bayes,
            status(self.bayes, Self::BAYES_TOL),
            self.marginalization,
            status(self.marginalization, Self::MARGINALIZATION_TOL),
            self.passed()
        )
    }
}

/// Adapter exposing the oracle as a [`ScoreSource`].
///
/// States are `(B, dim, 1)`; frame 0 of each condition carries the labels:
/// pitch ID `m < n_pitch` and phoneme ID `c < n_text`, or the `<unknown>`
/// IDs for marginalized axes.
pub struct OracleScorer<'a> {
    pub oracle: &'a MixtureOracle,
}

impl OracleScorer<'_> {
    pub fn condition_of(fc: &FrameConditions) -> Result<OracleCondition> {
        let (Some(&p), Some(&c)) = (fc.pitch_ids.first(), fc.phoneme_ids.first()) else {
            return Err(Error::Domain("oracle conditions need one frame".into()));
        };
        Ok(match (p == PITCH_UNKNOWN, c == PHONEME_UNKNOWN) {
            (false, false) => OracleCondition::Full { pitch: p as usize, text: c as usize },
            (false, true) => OracleCondition::PitchOnly { pitch: p as usize },
            (true, false) => OracleCondition::TextOnly { text: c as usize },
            (true, true) => OracleCondition::None,
        })
    }

    /// One-frame conditions encoding `cond`.
    pub fn conditions(cond: OracleCondition) -> FrameConditions {
        let (p, c) = match cond {
            OracleCondition::Full { pitch, text } => (pitch as u32, text as u32),
            OracleCondition::PitchOnly { pitch } => (pitch as u32, PHONEME_UNKNOWN),
            OracleCondition::TextOnly { text } => (PITCH_UNKNOWN, text as u32),
            OracleCondition::None => (PITCH_UNKNOWN, PHONEME_UNKNOWN),
        };
        FrameConditions { phoneme_ids: vec![c], pitch_ids: vec![p], speaker_id: 0 }
    }
}

impl ScoreSource for OracleScorer<'_> {
    fn scores(&self, x: &Array3<f64>, conds: &[FrameConditions], t: f64) -> Result<Array3<f64>> {
        let (b, d, frames) = x.dim();
        if d != self.oracle.dim || frames != 1 || conds.len() != b {
            return Err(Error::Domain(format!("oracle expects (B, {}, 1) states", self.oracle.dim)));
        }
        let mut out = Array3::zeros(x.raw_dim());
        for (i, fc) in conds.iter().enumerate() {
            let cond = Self::condition_of(fc)?;
            let s = self.oracle.score(x.slice(ndarray::s![i, .., 0]), t, cond)?;
            out.slice_mut(ndarray::s![i, .., 0]).assign(&s);
        }
        Ok(out)
    }
}
