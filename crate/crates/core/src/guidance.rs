//! Classifier-free guidance over masked condition variants.
//!
//! One jointly trained score estimator is evaluated at the full conditions
//! `(m, c)`, a partially masked variant (`(m, ∅_c)` or `(∅_m, c)`) and the
//! fully masked `(∅_m, ∅_c)`; the differences between those scores act as
//! the text and pitch guidance terms added to the conditional score.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::labelkit::{mask_conditions, FrameConditions, MaskTarget};
use crate::{Error, Result};

/// Anything that can score a batch of states under per-item conditions.
pub trait ScoreSource {
    /// `x` is `(B, rows, T)`; `conds[b]` conditions item `b`.
    fn scores(&self, x: &Array3<f64>, conds: &[FrameConditions], t: f64) -> Result<Array3<f64>>;
}

impl<S: ScoreSource + ?Sized> ScoreSource for &S {
    fn scores(&self, x: &Array3<f64>, conds: &[FrameConditions], t: f64) -> Result<Array3<f64>> {
        (**self).scores(x, conds, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    Single,
    DualPitchAnchored,
    DualTextAnchored,
}

impl GuidanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::Single => "single",
            GuidanceMode::DualPitchAnchored => "dual_pitch_anchored",
            GuidanceMode::DualTextAnchored => "dual_text_anchored",
        }
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => GuidanceMode::None,
            "single" => GuidanceMode::Single,
            "dual_pitch_anchored" | "dual" => GuidanceMode::DualPitchAnchored,
            "dual_text_anchored" => GuidanceMode::DualTextAnchored,
            other => return Err(Error::Config(format!("unknown guidance mode '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Text guidance weight; the only weight in single mode.
    pub w1: f64,
    /// Pitch guidance weight.
    pub w2: f64,
    pub norm_based: bool,
    pub eps_norm: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            mode: GuidanceMode::DualPitchAnchored,
            w1: 0.2,
            w2: 0.02,
            norm_based: true,
            eps_norm: 1e-8,
        }
    }
}

impl GuidanceConfig {
    pub fn unguided() -> Self {
        GuidanceConfig {
            mode: GuidanceMode::None,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0) {
            return Err(Error::Config(format!("guidance weights must be >= 0, got {} and {}", self.w1, self.w2)));
        }
        if !(self.eps_norm > 0.0) {
            return Err(Error::Config("eps_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Score estimates at the condition variants for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTriple {
    /// `s(X_t, m, c)`
    pub full: Array2<f64>,
    /// `s(X_t, m, ∅_c)`
    pub pitch_only: Option<Array2<f64>>,
    /// `s(X_t, ∅_m, ∅_c)`
    pub uncond: Option<Array2<f64>>,
    /// `s(X_t, ∅_m, c)`
    pub text_only: Option<Array2<f64>>,
}

fn frobenius(m: ArrayView2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖anchor‖ / max(‖delta‖, eps_norm)`.
pub fn norm_scale(anchor: ArrayView2<f64>, delta: ArrayView2<f64>, eps_norm: f64) -> f64 {
    frobenius(anchor) / frobenius(delta).max(eps_norm)
}

// Double-double helpers: algebraically equal guidance forms (dual with
// w1 = w2 versus single) then round to the same f64.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn dd_add(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (s, e) = two_sum(a.0, b.0);
    let e = e + a.1 + b.1;
    two_sum(s, e)
}

#[inline]
fn dd_scale(c: f64, a: (f64, f64)) -> (f64, f64) {
    let p = c * a.0;
    let e = c.mul_add(a.0, -p) + c * a.1;
    two_sum(p, e)
}

/// `anchor + c1·(anchor − a) + c2·(a − b)` with one final rounding.
fn combine(anchor: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>, c1: f64, c2: f64) -> Array2<f64> {
    let mut out = Array2::zeros(anchor.raw_dim());
    Zip::from(&mut out).and(anchor).and(a).and(b).for_each(|o, &s, &a, &b| {
        let d1 = dd_scale(c1, two_sum(s, -a));
        let d2 = dd_scale(c2, two_sum(a, -b));
        let r = dd_add(dd_add((s, 0.0), d1), d2);
        *o = r.0 + r.1;
    });
    out
}

fn member<'a>(m: &'a Option<Array2<f64>>, name: &str, mode: GuidanceMode) -> Result<&'a Array2<f64>> {
    m.as_ref()
        .ok_or_else(|| Error::Config(format!("guidance mode {} needs the {name} score", mode.as_str())))
}

/// Guided total score; guidance is always added to the conditional score.
pub fn guided_score(triple: &ScoreTriple, g: &GuidanceConfig) -> Result<Array2<f64>> {
    let full = &triple.full;
    let alpha = |delta: Array2<f64>| {
        if g.norm_based {
            norm_scale(full.view(), delta.view(), g.eps_norm)
        } else {
            1.0
        }
    };
    match g.mode {
        GuidanceMode::None => Ok(full.clone()),
        GuidanceMode::Single => {
            let uncond = member(&triple.uncond, "unconditional", g.mode)?;
            let a = alpha(full - uncond);
            // single term: s + a·w·(s − u), written with a zero second term
            Ok(combine(full, uncond, uncond, a * g.w1, 0.0))
        }
        GuidanceMode::DualPitchAnchored | GuidanceMode::DualTextAnchored => {
            let partial = if g.mode == GuidanceMode::DualPitchAnchored {
                member(&triple.pitch_only, "pitch-only", g.mode)?
            } else {
                member(&triple.text_only, "text-only", g.mode)?
            };
            let uncond = member(&triple.uncond, "unconditional", g.mode)?;
            let a1 = alpha(full - partial);
            let a2 = alpha(partial - uncond);
            Ok(combine(full, partial, uncond, a1 * g.w1, a2 * g.w2))
        }
    }
}

/// Evaluates the score variants a guidance mode needs for a batch.
///
/// Each variant is a separate call on the full batch, so the conditional
/// score is computed identically in every mode.
pub fn evaluate_triples<S: ScoreSource + ?Sized>(
    x: &Array3<f64>,
    conds: &[FrameConditions],
    t: f64,
    source: &S,
    mode: GuidanceMode,
) -> Result<Vec<ScoreTriple>> {
    if x.len_of(Axis(0)) != conds.len() {
        return Err(Error::Domain("batch size differs from condition count".into()));
    }
    let masked = |target: MaskTarget| -> Result<Array3<f64>> {
        let c: Vec<FrameConditions> = conds.iter().map(|fc| mask_conditions(fc, target)).collect();
        source.scores(x, &c, t)
    };
    let full = source.scores(x, conds, t)?;
    let (pitch_only, text_only, uncond) = match mode {
        GuidanceMode::None => (None, None, None),
        GuidanceMode::Single => (None, None, Some(masked(MaskTarget::None)?)),
        GuidanceMode::DualPitchAnchored => (Some(masked(MaskTarget::PitchOnly)?), None, Some(masked(MaskTarget::None)?)),
        GuidanceMode::DualTextAnchored => (None, Some(masked(MaskTarget::TextOnly)?), Some(masked(MaskTarget::None)?)),
    };
    let pick = |a: &Option<Array3<f64>>, b: usize| a.as_ref().map(|a| a.index_axis(Axis(0), b).to_owned());
    Ok((0..conds.len())
        .map(|b| ScoreTriple {
            full: full.index_axis(Axis(0), b).to_owned(),
            pitch_only: pick(&pitch_only, b),
            uncond: pick(&uncond, b),
            text_only: pick(&text_only, b),
        })
        .collect())
}

/// Single-item convenience over [`evaluate_triples`].
pub fn evaluate_triple<S: ScoreSource + ?Sized>(
    x: ArrayView2<f64>,
    fc: &FrameConditions,
    t: f64,
    source: &S,
    mode: GuidanceMode,
) -> Result<ScoreTriple> {
    let batch = x.to_owned().insert_axis(Axis(0));
    Ok(evaluate_triples(&batch, std::slice::from_ref(fc), t, source, mode)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn triple(full: Array2<f64>, pitch: Array2<f64>, uncond: Array2<f64>) -> ScoreTriple {
        ScoreTriple { full, pitch_only: Some(pitch), uncond: Some(uncond), text_only: None }
    }

    fn plain(mode: GuidanceMode, w1: f64, w2: f64) -> GuidanceConfig {
        GuidanceConfig { mode, w1, w2, norm_based: false, eps_norm: 1e-8 }
    }

    #[test]
    fn norm_scale_examples() {
        let anchor = array![[2.0, 0.0]];
        let delta = array![[0.0, 1.0]];
        assert_eq!(norm_scale(anchor.view(), delta.view(), 1e-8), 2.0);
        let zero = Array2::zeros((1, 2));
        assert_eq!(norm_scale(anchor.view(), zero.view(), 1e-8), 2.0 / 1e-8);
    }

    #[test]
    fn toy_dual_substitution() {
        let t = triple(array![[2.0, 0.0]], array![[1.0, 0.0]], array![[0.0, 0.0]]);
        let s = guided_score(&t, &plain(GuidanceMode::DualPitchAnchored, 0.2, 0.02)).unwrap();
        assert!((s[[0, 0]] - 2.22).abs() < 1e-15);
        assert_eq!(s[[0, 1]], 0.0);
    }

    #[test]
    fn zero_weights_return_conditional_score() {
        let t = ScoreTriple {
            full: array![[1.5, -0.5]],
            pitch_only: Some(array![[0.1, 0.2]]),
            uncond: Some(array![[-3.0, 4.0]]),
            text_only: Some(array![[7.0, 7.0]]),
        };
        for mode in [GuidanceMode::None, GuidanceMode::Single, GuidanceMode::DualPitchAnchored, GuidanceMode::DualTextAnchored] {
            for norm_based in [false, true] {
                let g = GuidanceConfig { mode, w1: 0.0, w2: 0.0, norm_based, eps_norm: 1e-8 };
                assert_eq!(guided_score(&t, &g).unwrap(), t.full);
            }
        }
    }

    #[test]
    fn missing_member_is_config_error() {
        let t = triple(array![[1.0]], array![[0.5]], array![[0.0]]);
        let g = plain(GuidanceMode::DualTextAnchored, 0.2, 0.02);
        assert!(matches!(guided_score(&t, &g), Err(Error::Config(_))));
        let t = ScoreTriple { full: array![[1.0]], pitch_only: None, uncond: None, text_only: None };
        assert!(guided_score(&t, &plain(GuidanceMode::Single, 0.2, 0.0)).is_err());
        assert!(guided_score(&t, &plain(GuidanceMode::None, 0.2, 0.0)).is_ok());
    }

    #[test]
    fn defaults_match_published_weights() {
        let g = GuidanceConfig::default();
        assert_eq!((g.w1, g.w2), (0.2, 0.02));
        assert_eq!(g.mode, GuidanceMode::DualPitchAnchored);
        assert!(g.norm_based);
        assert_eq!(g.eps_norm, 1e-8);
    }

    fn mat(n: usize) -> impl Strategy<Value = Array2<f64>> {
        prop::collection::vec(-10.0f64..10.0, n).prop_map(move |v| Array2::from_shape_vec((2, n / 2), v).unwrap())
    }

    proptest! {
        #[test]
        fn dual_equals_single_at_equal_weights(f in mat(8), p in mat(8), u in mat(8), w in 0.0f64..2.0) {
            let t = triple(f, p, u);
            let dual = guided_score(&t, &plain(GuidanceMode::DualPitchAnchored, w, w)).unwrap();
            let single = guided_score(&t, &plain(GuidanceMode::Single, w, 0.0)).unwrap();
            for (a, b) in dual.iter().zip(single.iter()) {
                prop_assert!((a.to_bits() as i64 - b.to_bits() as i64).abs() <= 4 || a == b, "{a} vs {b}");
            }
        }

        #[test]
        fn linear_in_weights(f in mat(6), p in mat(6), u in mat(6), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let t = triple(f.clone(), p, u);
            let s = |w1, w2| guided_score(&t, &plain(GuidanceMode::DualPitchAnchored, w1, w2)).unwrap() - &f;
            let sum = s(a, b);
            let parts = s(a, 0.0) + s(0.0, b);
            for (x, y) in sum.iter().zip(parts.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn norm_based_delta_matches_anchor(f in mat(8), p in mat(8), u in mat(8), w1 in 0.01f64..1.0) {
            let t = triple(f.clone(), p.clone(), u);
            let g = GuidanceConfig { mode: GuidanceMode::DualPitchAnchored, w1, w2: 0.0, norm_based: true, eps_norm: 1e-8 };
            let delta = &f - &p;
            prop_assume!(frobenius(delta.view()) >= 1e-8);
            let guided = guided_score(&t, &g).unwrap();
            let applied = &guided - &f;
            let expect = w1 * frobenius(f.view());
            prop_assert!((frobenius(applied.view()) - expect).abs() <= 1e-12 * (1.0 + expect));
        }
    }
}
