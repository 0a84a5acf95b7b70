//! Synthetic corpus: random note sequences rendered to deterministic
//! mel-like matrices, so the whole pipeline runs without external data.
//!
//! Voiced frames are harmonic stacks at the labeled F0 shaped by a
//! per-phoneme formant envelope and a per-speaker spectral tilt; onsets add
//! a noise band. Rests sit at the log floor.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audiofeat::{band_edges, save_mel, MelParams, MelSpectrogram, Waveform, LOG_FLOOR};
use crate::labelkit::{
    expand_labels, write_label_file, Labeling, Note, Pitch, ScoreLabel, Syllable, CODA_BASE, NUCLEUS_BASE,
    N_CODAS, N_NUCLEI, N_ONSETS, PHONEME_SILENCE, PITCH_REST,
};
use crate::{Error, Result};

const MIN_NOTE_FRAMES: usize = 8;
const MAX_NOTE_FRAMES: usize = 20;
const HARMONIC_GAIN: f64 = 60.0;
const BREATH_LEVEL: f64 = 1e-3;
const JITTER: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_items: usize,
    /// Fraction of items whose labels are kept; the rest are written unlabeled.
    pub labeled_fraction: f64,
    pub frames: usize,
    pub n_speakers: u32,
    /// Size of the syllable inventory drawn from.
    pub n_syllables: usize,
    pub pitch_low: u8,
    pub pitch_high: u8,
    pub sample_rate: u32,
    pub hop: usize,
    pub n_mels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 200,
            labeled_fraction: 0.1,
            frames: 64,
            n_speakers: 4,
            n_syllables: 8,
            pitch_low: 55,
            pitch_high: 74,
            sample_rate: 22050,
            hop: 256,
            n_mels: 80,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < MIN_NOTE_FRAMES + 4 {
            return Err(Error::Config(format!("synthetic items need at least {} frames", MIN_NOTE_FRAMES + 4)));
        }
        if self.pitch_low > self.pitch_high || self.pitch_high > 127 {
            return Err(Error::Config("synthetic pitch range must satisfy low <= high <= 127".into()));
        }
        if self.n_syllables == 0 || self.n_syllables > 64 {
            return Err(Error::Config("synth_syllables must be in 1..=64".into()));
        }
        Ok(())
    }

    fn mel_params(&self) -> MelParams {
        MelParams { sample_rate: self.sample_rate, hop: self.hop, n_mels: self.n_mels, ..MelParams::default() }
    }

    fn n_labeled(&self) -> usize {
        (self.n_items as f64 * self.labeled_fraction).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct SynthItem {
    pub id: String,
    /// Ground-truth label, always fully labeled.
    pub label: ScoreLabel,
    /// What the corpus exposes: `label` itself or its unlabeled version.
    pub observed: ScoreLabel,
    pub mel: MelSpectrogram,
}

/// The first `n` syllables of a fixed, varied walk through the Hangul
/// block; odd entries carry a coda.
pub fn syllable_inventory(n: usize) -> Vec<char> {
    (0..n as u32)
        .map(|i| {
            let onset = (i * 7) % N_ONSETS;
            let nucleus = (i * 5 + i / 4) % N_NUCLEI;
            let coda = if i % 2 == 1 { (i * 3) % (N_CODAS - 1) + 1 } else { 0 };
            char::from_u32(0xAC00 + onset * 588 + nucleus * 28 + coda).expect("inside the Hangul block")
        })
        .collect()
}

fn frame_time(frame: usize, cfg: &SynthConfig) -> f64 {
    // mid-frame instants floor back to the intended frame index
    (frame as f64 + 0.5) * cfg.hop as f64 / cfg.sample_rate as f64
}

/// Random note sequence covering most of `cfg.frames`.
pub fn random_label(cfg: &SynthConfig, speaker_id: u32, rng: &mut impl Rng) -> ScoreLabel {
    let inventory = syllable_inventory(cfg.n_syllables);
    let mut notes = Vec::new();
    let mut f = rng.random_range(1..=3);
    while f + MIN_NOTE_FRAMES + 1 <= cfg.frames {
        let len = rng.random_range(MIN_NOTE_FRAMES..=MAX_NOTE_FRAMES).min(cfg.frames - 1 - f);
        notes.push(Note {
            start_sec: frame_time(f, cfg),
            end_sec: frame_time(f + len, cfg),
            pitch: Pitch::Midi(rng.random_range(cfg.pitch_low..=cfg.pitch_high)),
            syllable: Syllable::Hangul(inventory[rng.random_range(0..inventory.len())]),
        });
        f += len + if rng.random_bool(0.3) { rng.random_range(1..=3) } else { 0 };
    }
    ScoreLabel { notes, speaker_id, labeling: Labeling::Full }
}

pub fn midi_to_hz(p: u32) -> f64 {
    440.0 * 2f64.powf((p as f64 - 69.0) / 12.0)
}

struct Formants {
    centers: [f64; 3],
    widths: [f64; 3],
    /// Centre of the frication band; onsets only.
    noise_center: f64,
}

fn formants(phoneme: u32) -> Formants {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF0_0000 + phoneme as u64);
    Formants {
        centers: [
            rng.random_range(250.0..900.0),
            rng.random_range(900.0..2600.0),
            rng.random_range(2600.0..3600.0),
        ],
        widths: [
            rng.random_range(80.0..200.0),
            rng.random_range(100.0..250.0),
            rng.random_range(150.0..300.0),
        ],
        noise_center: rng.random_range(2500.0..6500.0),
    }
}

fn envelope(f: &Formants, hz: f64) -> f64 {
    let gains = [1.0, 0.7, 0.4];
    0.05 + (0..3)
        .map(|i| gains[i] * (-0.5 * ((hz - f.centers[i]) / f.widths[i]).powi(2)).exp())
        .sum::<f64>()
}

fn speaker_tilt(speaker: u32) -> f64 {
    0.4 + 0.15 * (speaker % 5) as f64
}

fn triangle(edges: &[f64], m: usize, hz: f64) -> f64 {
    let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
    let w = ((hz - lo) / (mid - lo)).min((hi - hz) / (hi - mid)).max(0.0);
    w * 2.0 / (hi - lo)
}

/// Renders a fully labeled score to `n_mels × frames` log-mel values.
/// `seed` only drives the small per-bin jitter.
pub fn render_mel(label: &ScoreLabel, frames: usize, cfg: &SynthConfig, seed: u64) -> Result<MelSpectrogram> {
    if label.labeling != Labeling::Full {
        return Err(Error::Precondition("rendering needs a fully labeled score".into()));
    }
    let fc = expand_labels(label, frames, cfg.sample_rate, cfg.hop as u32)?;
    let p = cfg.mel_params();
    let edges = band_edges(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::<f32>::zeros((p.n_mels, frames));
    let tilt = speaker_tilt(label.speaker_id);
    for j in 0..frames {
        let (ph, pitch) = (fc.phoneme_ids[j], fc.pitch_ids[j]);
        let mut energy = vec![0.0f64; p.n_mels];
        if ph != PHONEME_SILENCE && pitch != PITCH_REST {
            let form = formants(ph);
            let onset = ph < NUCLEUS_BASE;
            let coda = ph >= CODA_BASE;
            let level = if onset { 0.4 } else if coda { 0.6 } else { 1.0 };
            let f0 = midi_to_hz(pitch);
            let mut k = 1;
            while k as f64 * f0 < p.f_max {
                let hz = k as f64 * f0;
                let amp = HARMONIC_GAIN * level * envelope(&form, hz) * (k as f64).powf(-tilt);
                for (m, e) in energy.iter_mut().enumerate() {
                    *e += amp * triangle(&edges, m, hz);
                }
                k += 1;
            }
            for (m, e) in energy.iter_mut().enumerate() {
                let centre = edges[m + 1];
                *e += BREATH_LEVEL;
                if onset {
                    *e += 0.05 * (-0.5 * ((centre - form.noise_center) / 800.0).powi(2)).exp();
                }
            }
        }
        for m in 0..p.n_mels {
            let jitter = JITTER * rng.sample::<f64, _>(StandardNormal);
            out[[m, j]] = ((energy[m] + LOG_FLOOR as f64).ln() + jitter) as f32;
        }
    }
    Ok(MelSpectrogram::new(out))
}

/// Auxiliary waveform: a phase-continuous sine following the labeled F0,
/// silent on rests, with exactly `frames` analysis frames.
pub fn render_f0_sine(label: &ScoreLabel, frames: usize, cfg: &SynthConfig) -> Result<Waveform> {
    let fc = expand_labels(label, frames, cfg.sample_rate, cfg.hop as u32)?;
    let n = (frames - 1) * cfg.hop;
    let mut phase = 0.0f64;
    let samples = (0..n)
        .map(|i| {
            let pitch = fc.pitch_ids[(i / cfg.hop).min(frames - 1)];
            if pitch > 127 {
                return 0.0;
            }
            phase += 2.0 * std::f64::consts::PI * midi_to_hz(pitch) / cfg.sample_rate as f64;
            (0.5 * phase.sin()) as f32
        })
        .collect();
    Ok(Waveform::new(samples, cfg.sample_rate))
}

/// Deterministic corpus; the first `round(n_items · labeled_fraction)` items
/// keep their labels.
pub fn generate_corpus(cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthItem>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_labeled = cfg.n_labeled();
    (0..cfg.n_items)
        .map(|i| {
            let speaker = rng.random_range(0..cfg.n_speakers);
            let label = random_label(cfg, speaker, &mut rng);
            let mel = render_mel(&label, cfg.frames, cfg, rng.random())?;
            let observed = if i < n_labeled { label.clone() } else { label.with_labeling(Labeling::None) };
            Ok(SynthItem { id: format!("item{i:04}"), label, observed, mel })
        })
        .collect()
}

/// Writes `<id>.lab` (observed label) and `<id>.mel` per item.
pub fn write_corpus(items: &[SynthItem], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for item in items {
        let lab = dir.join(format!("{}.lab", item.id));
        std::fs::write(&lab, write_label_file(&item.observed)).map_err(|e| Error::io(&lab, e))?;
        save_mel(&dir.join(format!("{}.mel", item.id)), &item.mel)?;
    }
    Ok(())
}
