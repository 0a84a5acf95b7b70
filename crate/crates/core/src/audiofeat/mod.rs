//! Audio front-end: log-mel spectrograms, autocorrelation F0 and the binary
//! mel container.

mod f0;
mod mel;
mod melio;

pub use f0::{extract_f0, F0_MAX_HZ, F0_MIN_HZ};
pub use mel::{mel_center_frequencies, mel_filterbank, mel_spectrogram, mel_spectrogram_with, MelParams};
pub(crate) use mel::band_edges;
pub use melio::{decode_mel, encode_mel, load_mel, save_mel};

use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 22050;
pub const N_FFT: usize = 1024;
pub const HOP: usize = 256;
pub const N_MELS: usize = 80;
pub const LOG_FLOOR: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Waveform { samples, sample_rate }
    }

    /// Reads a mono (or first-channel) WAV file.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let samples: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(e.to_string()))?,
            hound::SampleFormat::Int => {
                let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 * scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Format(e.to_string()))?
            }
        };
        let mono = samples.into_iter().step_by(channels).collect();
        Ok(Waveform::new(mono, spec.sample_rate))
    }
}

/// Log-mel matrix, `n_mels` rows by `T` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f32>,
}

impl MelSpectrogram {
    pub fn new(values: Array2<f32>) -> Self {
        MelSpectrogram { values }
    }

    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}

/// Per-frame fundamental frequency in Hz; 0 marks unvoiced frames.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Track {
    pub f0_hz: Vec<f64>,
}

impl F0Track {
    pub fn new(f0_hz: Vec<f64>) -> Self {
        F0Track { f0_hz }
    }

    pub fn n_frames(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn voiced(&self) -> impl Iterator<Item = f64> + '_ {
        self.f0_hz.iter().copied().filter(|&f| f > 0.0)
    }
}
