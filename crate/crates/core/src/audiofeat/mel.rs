use std::sync::Arc;

use ndarray::Array2;
use rustfft::{num_complex::Complex, Fft, FftPlanner};

use super::{MelSpectrogram, Waveform, HOP, LOG_FLOOR, N_FFT, N_MELS, SAMPLE_RATE};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelParams {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelParams {
    fn default() -> Self {
        MelParams {
            sample_rate: SAMPLE_RATE,
            n_fft: N_FFT,
            hop: HOP,
            n_mels: N_MELS,
            f_min: 0.0,
            f_max: 8000.0,
        }
    }
}

// Slaney mel scale: linear below 1 kHz, logarithmic above.
const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn logstep() -> f64 {
    6.4f64.ln() / 27.0
}

pub(crate) fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / logstep()
    } else {
        hz / F_SP
    }
}

pub(crate) fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * (logstep() * (mel - MIN_LOG_MEL)).exp()
    } else {
        mel * F_SP
    }
}

/// Band edges: `n_mels + 2` frequencies equally spaced on the mel scale.
pub(crate) fn band_edges(p: &MelParams) -> Vec<f64> {
    let lo = hz_to_mel(p.f_min);
    let hi = hz_to_mel(p.f_max);
    (0..p.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (p.n_mels + 1) as f64))
        .collect()
}

/// Peak frequency of each triangular filter.
pub fn mel_center_frequencies(p: &MelParams) -> Vec<f64> {
    band_edges(p)[1..=p.n_mels].to_vec()
}

/// Area-normalized triangular filters, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(p: &MelParams) -> Array2<f64> {
    let n_bins = p.n_fft / 2 + 1;
    let edges = band_edges(p);
    let mut fb = Array2::zeros((p.n_mels, n_bins));
    for m in 0..p.n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let enorm = 2.0 / (hi - lo);
        for k in 0..n_bins {
            let f = k as f64 * p.sample_rate as f64 / p.n_fft as f64;
            let rise = (f - lo) / (mid - lo);
            let fall = (hi - f) / (hi - mid);
            fb[[m, k]] = rise.min(fall).max(0.0) * enorm;
        }
    }
    fb
}

fn hann(n: usize) -> Vec<f64> {
    // periodic window
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Magnitude STFT, `(n_fft/2 + 1) × T` with `T = len/hop + 1`.
pub(crate) fn stft_magnitude(samples: &[f32], n_fft: usize, hop: usize, fft: &Arc<dyn Fft<f64>>) -> Array2<f64> {
    let n_frames = samples.len() / hop + 1;
    let n_bins = n_fft / 2 + 1;
    let window = hann(n_fft);
    let half = (n_fft / 2) as isize;
    let mut out = Array2::zeros((n_bins, n_frames));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..n_frames {
        let center = (t * hop) as isize;
        for (j, slot) in buf.iter_mut().enumerate() {
            let idx = reflect_index(center - half + j as isize, samples.len());
            *slot = Complex::new(samples[idx] as f64 * window[j], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            out[[k, t]] = buf[k].norm();
        }
    }
    out
}

pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    mel_spectrogram_with(w, &MelParams::default())
}

pub fn mel_spectrogram_with(w: &Waveform, p: &MelParams) -> Result<MelSpectrogram> {
    if w.sample_rate != p.sample_rate {
        return Err(Error::Precondition(format!(
            "sample rate {} Hz, expected {} Hz",
            w.sample_rate, p.sample_rate
        )));
    }
    if w.samples.len() < p.n_fft {
        return Err(Error::Precondition(format!(
            "waveform has {} samples, need at least {}",
            w.samples.len(),
            p.n_fft
        )));
    }
    let fft = FftPlanner::new().plan_fft_forward(p.n_fft);
    let mag = stft_magnitude(&w.samples, p.n_fft, p.hop, &fft);
    let mel = mel_filterbank(p).dot(&mag);
    let floor = LOG_FLOOR as f64;
    Ok(MelSpectrogram::new(mel.mapv(|v| v.max(floor).ln() as f32)))
}
