use super::{F0Track, Waveform, HOP, SAMPLE_RATE};
use crate::{Error, Result};

pub const F0_MIN_HZ: f64 = 50.0;
pub const F0_MAX_HZ: f64 = 1100.0;

const WINDOW: usize = 1024;
const VOICING_THRESHOLD: f64 = 0.3;
const RMS_GATE: f64 = 1e-4;
/// First peak within this fraction of the global maximum wins (octave guard).
const PEAK_RATIO: f64 = 0.9;

/// Normalized-autocorrelation F0 track on the mel frame grid.
pub fn extract_f0(w: &Waveform) -> Result<F0Track> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::Precondition(format!(
            "sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            w.sample_rate
        )));
    }
    let sr = w.sample_rate as f64;
    let lag_min = (sr / F0_MAX_HZ).floor() as usize;
    let lag_max = (sr / F0_MIN_HZ).ceil() as usize;
    let n_frames = w.samples.len() / HOP + 1;

    let pad = WINDOW / 2;
    let mut padded = vec![0.0f64; pad + w.samples.len() + WINDOW + lag_max + 1];
    for (dst, &s) in padded[pad..].iter_mut().zip(&w.samples) {
        *dst = s as f64;
    }

    let mut nccf = vec![0.0; lag_max + 2];
    let f0 = (0..n_frames)
        .map(|t| {
            // window centered on t * HOP
            let seg = &padded[t * HOP..];
            let energy0: f64 = seg[..WINDOW].iter().map(|x| x * x).sum();
            if (energy0 / WINDOW as f64).sqrt() < RMS_GATE {
                return 0.0;
            }
            // running energy of the lagged window
            let mut energy_lag: f64 = seg[lag_min - 1..lag_min - 1 + WINDOW].iter().map(|x| x * x).sum();
            for lag in lag_min - 1..=lag_max + 1 {
                if lag >= lag_min {
                    let out = seg[lag - 1];
                    let inp = seg[lag - 1 + WINDOW];
                    energy_lag += inp * inp - out * out;
                }
                let cross: f64 = seg[..WINDOW].iter().zip(&seg[lag..lag + WINDOW]).map(|(a, b)| a * b).sum();
                let denom = (energy0 * energy_lag.max(0.0)).sqrt();
                nccf[lag] = if denom > 0.0 { cross / denom } else { 0.0 };
            }
            pick_period(&nccf, lag_min, lag_max).map_or(0.0, |lag| {
                let f = sr / lag;
                if (F0_MIN_HZ..=F0_MAX_HZ).contains(&f) {
                    f
                } else {
                    0.0
                }
            })
        })
        .collect();
    Ok(F0Track::new(f0))
}

/// Fractional lag of the first strong local maximum, if voiced.
fn pick_period(r: &[f64], lag_min: usize, lag_max: usize) -> Option<f64> {
    let best = (lag_min..=lag_max).map(|l| r[l]).fold(f64::MIN, f64::max);
    if best < VOICING_THRESHOLD {
        return None;
    }
    let lag = (lag_min..=lag_max)
        .find(|&l| r[l] >= PEAK_RATIO * best && r[l] >= r[l - 1] && r[l] >= r[l + 1])
        .or_else(|| (lag_min..=lag_max).max_by(|&a, &b| r[a].total_cmp(&r[b])))?;
    let (a, b, c) = (r[lag - 1], r[lag], r[lag + 1]);
    let curvature = a - 2.0 * b + c;
    let shift = if curvature < 0.0 { 0.5 * (a - c) / curvature } else { 0.0 };
    Some(lag as f64 + shift.clamp(-0.5, 0.5))
}
