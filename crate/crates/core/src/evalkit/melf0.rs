//! F0 from a log-mel spectrogram by harmonic contrast: a candidate `f`
//! scores the weighted mean of `A(k·f) − A((k − ½)·f)`, where `A` is the
//! log-mel value interpolated at a frequency. Subharmonics and octaves
//! score lower than the true F0 because half of their probes land between
//! harmonics.

use crate::audiofeat::{mel_center_frequencies, F0Track, MelParams, MelSpectrogram, LOG_FLOOR};

const F_LOW: f64 = 80.0;
const F_HIGH: f64 = 1000.0;
/// Candidate spacing in cents.
const STEP_CENTS: f64 = 5.0;
const HARMONIC_LIMIT_HZ: f64 = 2500.0;
const DECAY: f64 = 0.85;
/// Minimum mean peak-to-gap contrast, in nats.
const VOICING_CONTRAST: f64 = 1.0;
/// Frames whose loudest bin is within this of the floor are unvoiced.
const LOUDNESS_MARGIN: f64 = 3.0;

fn interpolate(centers: &[f64], column: &[f64], hz: f64) -> f64 {
    if hz <= centers[0] {
        return column[0];
    }
    let i = centers.partition_point(|&c| c < hz);
    if i >= centers.len() {
        return column[centers.len() - 1];
    }
    let w = (hz - centers[i - 1]) / (centers[i] - centers[i - 1]);
    column[i - 1] * (1.0 - w) + column[i] * w
}

fn contrast(centers: &[f64], column: &[f64], f0: f64) -> f64 {
    let (mut acc, mut norm, mut w) = (0.0, 0.0, 1.0);
    let mut k = 1.0;
    while k * f0 <= HARMONIC_LIMIT_HZ {
        acc += w * (interpolate(centers, column, k * f0) - interpolate(centers, column, (k - 0.5) * f0));
        norm += w;
        w *= DECAY;
        k += 1.0;
    }
    if norm > 0.0 {
        acc / norm
    } else {
        f64::NEG_INFINITY
    }
}

/// Per-frame F0 in Hz (0 = unvoiced) for a mel computed with the default
/// front-end parameters and `mel.n_mels()` bands.
pub fn mel_f0(mel: &MelSpectrogram) -> F0Track {
    let p = MelParams { n_mels: mel.n_mels(), ..MelParams::default() };
    let centers = mel_center_frequencies(&p);
    let n_cand = (1200.0 * (F_HIGH / F_LOW).log2() / STEP_CENTS) as usize + 1;
    let candidates: Vec<f64> = (0..n_cand).map(|i| F_LOW * 2f64.powf(i as f64 * STEP_CENTS / 1200.0)).collect();
    let floor = (LOG_FLOOR as f64).ln();
    let f0 = (0..mel.n_frames())
        .map(|j| {
            let column: Vec<f64> = mel.values.column(j).iter().map(|&v| v as f64).collect();
            let loudest = column.iter().cloned().fold(f64::MIN, f64::max);
            if loudest < floor + LOUDNESS_MARGIN {
                return 0.0;
            }
            let (best, score) = candidates
                .iter()
                .map(|&f| (f, contrast(&centers, &column, f)))
                .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            if score >= VOICING_CONTRAST {
                best
            } else {
                0.0
            }
        })
        .collect();
    F0Track::new(f0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audiofeat::{mel_spectrogram, Waveform};
    use crate::labelkit::{Labeling, Note, Pitch, ScoreLabel, Syllable};
    use crate::synth::{midi_to_hz, render_mel, SynthConfig};

    fn sung(pitch: u8, syllable: char) -> MelSpectrogram {
        let label = ScoreLabel {
            notes: vec![Note {
                start_sec: 0.5 * 256.0 / 22050.0,
                end_sec: 30.5 * 256.0 / 22050.0,
                pitch: Pitch::Midi(pitch),
                syllable: Syllable::Hangul(syllable),
            }],
            speaker_id: 1,
            labeling: Labeling::Full,
        };
        render_mel(&label, 32, &SynthConfig::default(), 3).unwrap()
    }

    #[test]
    fn recovers_rendered_pitches_within_a_semitone() {
        for pitch in [55u8, 60, 64, 69, 74] {
            for syllable in ['가', '눈', '봄'] {
                let f0 = mel_f0(&sung(pitch, syllable));
                let target = midi_to_hz(pitch as u32);
                // nucleus frames
                for j in 6..24 {
                    let semis = 12.0 * (f0.f0_hz[j] / target).log2();
                    assert!(semis.abs() < 0.5, "pitch {pitch} {syllable} frame {j}: {} Hz", f0.f0_hz[j]);
                }
                assert_eq!(f0.f0_hz[31], 0.0);
            }
        }
    }

    #[test]
    fn harmonic_waveform_through_the_front_end() {
        let sr = 22050.0;
        let f = 220.0;
        let samples: Vec<f32> = (0..22050)
            .map(|i| {
                let t = i as f64 / sr;
                (1..=8).map(|k| 0.3 / k as f64 * (2.0 * std::f64::consts::PI * k as f64 * f * t).sin()).sum::<f64>() as f32
            })
            .collect();
        let mel = mel_spectrogram(&Waveform::new(samples, 22050)).unwrap();
        let f0 = mel_f0(&mel);
        let voiced: Vec<f64> = f0.voiced().collect();
        assert!(voiced.len() > 70);
        let median = {
            let mut v = voiced.clone();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        assert!((12.0 * (median / f).log2()).abs() < 0.5, "{median}");
    }

    #[test]
    fn floor_level_frames_are_unvoiced() {
        let mel = MelSpectrogram::new(ndarray::Array2::from_elem((80, 5), LOG_FLOOR.ln()));
        assert!(mel_f0(&mel).f0_hz.iter().all(|&f| f == 0.0));
    }
}
