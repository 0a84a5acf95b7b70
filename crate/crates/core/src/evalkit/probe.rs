//! Frame classifier predicting phoneme and pitch IDs from a mel; used only
//! to compare generated mels against their conditions.

use candle_core::{DType, Tensor};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audiofeat::MelSpectrogram;
use crate::labelkit::{FrameConditions, PHONEME_VOCAB, PITCH_VOCAB};
use crate::model::layers::{silu, Conv1d};
use crate::model::{Adam, Checkpoint, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub n_mels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Input standardization.
    pub mel_mean: f64,
    pub mel_std: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { n_mels: 80, hidden: 64, kernel: 5, steps: 400, lr: 1e-3, batch_size: 16, mel_mean: -5.0, mel_std: 2.5 }
    }
}

pub struct Probe {
    cfg: ProbeConfig,
    params: ParamStore,
    layers: [Conv1d; 3],
}

fn log_softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

fn one_hot(ids: &[&[u32]], vocab: usize, dtype: DType) -> Result<Tensor> {
    let (b, t) = (ids.len(), ids[0].len());
    let mut data = vec![0.0f64; b * vocab * t];
    for (bi, row) in ids.iter().enumerate() {
        for (j, &id) in row.iter().enumerate() {
            data[(bi * vocab + id as usize) * t + j] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (b, vocab, t), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

fn argmax_channels(logits: &Array3<f64>, b: usize, range: std::ops::Range<usize>) -> Vec<u32> {
    let t = logits.dim().2;
    (0..t)
        .map(|j| {
            range
                .clone()
                .max_by(|&x, &y| logits[[b, x, j]].total_cmp(&logits[[b, y, j]]))
                .map(|c| (c - range.start) as u32)
                .unwrap_or(0)
        })
        .collect()
}

impl Probe {
    pub fn new(cfg: ProbeConfig, seed: u64) -> Result<Self> {
        if cfg.kernel % 2 == 0 || cfg.hidden == 0 || cfg.n_mels == 0 {
            return Err(Error::Config("probe needs an odd kernel and positive widths".into()));
        }
        let mut params = ParamStore::new(seed, DType::F32);
        let layers = [
            Conv1d::new(&mut params, "probe.0", cfg.n_mels, cfg.hidden, cfg.kernel)?,
            Conv1d::new(&mut params, "probe.1", cfg.hidden, cfg.hidden, cfg.kernel)?,
            Conv1d::new(&mut params, "probe.2", cfg.hidden, PHONEME_VOCAB + PITCH_VOCAB, cfg.kernel)?,
        ];
        Ok(Probe { cfg, params, layers })
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.cfg
    }

    fn input(&self, mels: &[&MelSpectrogram]) -> Result<Tensor> {
        let t = mels[0].n_frames();
        if mels.iter().any(|m| m.n_mels() != self.cfg.n_mels || m.n_frames() != t) {
            return Err(Error::Domain(format!("probe expects {}-band mels of equal length", self.cfg.n_mels)));
        }
        let mut data = Vec::with_capacity(mels.len() * self.cfg.n_mels * t);
        for m in mels {
            data.extend(m.values.iter().map(|&v| ((v as f64 - self.cfg.mel_mean) / self.cfg.mel_std) as f32));
        }
        Ok(Tensor::from_vec(data, (mels.len(), self.cfg.n_mels, t), &candle_core::Device::Cpu)?)
    }

    /// Logits `(B, PHONEME_VOCAB + PITCH_VOCAB, T)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = silu(&self.layers[0].forward(x)?)?;
        let h = silu(&self.layers[1].forward(&h)?)?;
        self.layers[2].forward(&h)
    }

    fn loss(&self, mels: &[&MelSpectrogram], conds: &[&FrameConditions]) -> Result<Tensor> {
        let logits = self.forward(&self.input(mels)?)?;
        let logp_ph = log_softmax_channels(&logits.narrow(1, 0, PHONEME_VOCAB)?)?;
        let logp_pi = log_softmax_channels(&logits.narrow(1, PHONEME_VOCAB, PITCH_VOCAB)?)?;
        let ph: Vec<&[u32]> = conds.iter().map(|c| c.phoneme_ids.as_slice()).collect();
        let pi: Vec<&[u32]> = conds.iter().map(|c| c.pitch_ids.as_slice()).collect();
        let frames = (conds.len() * conds[0].n_frames()) as f64;
        let nll = ((logp_ph * one_hot(&ph, PHONEME_VOCAB, DType::F32)?)?.sum_all()?
            + (logp_pi * one_hot(&pi, PITCH_VOCAB, DType::F32)?)?.sum_all()?)?;
        Ok(nll.affine(-1.0 / frames, 0.0)?)
    }

    /// Trains on ground-truth pairs; all items must share one length.
    /// Returns the per-step losses.
    pub fn train(&mut self, data: &[(MelSpectrogram, FrameConditions)], seed: u64) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Precondition("probe needs training data".into()));
        }
        for (m, fc) in data {
            if m.n_frames() != fc.n_frames() {
                return Err(Error::Domain("mel and conditions differ in length".into()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adam = Adam::new(self.cfg.lr);
        adam.clip_norm = None;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = order.len();
        let mut losses = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let mut idx = Vec::with_capacity(self.cfg.batch_size);
            while idx.len() < self.cfg.batch_size.min(data.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let mels: Vec<&MelSpectrogram> = idx.iter().map(|&i| &data[i].0).collect();
            let conds: Vec<&FrameConditions> = idx.iter().map(|&i| &data[i].1).collect();
            let loss = self.loss(&mels, &conds)?;
            losses.push(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?);
            adam.update(&self.params, &loss.backward()?)?;
        }
        Ok(losses)
    }

    /// Predicted `(phoneme_ids, pitch_ids)` per frame.
    pub fn predict(&self, mel: &MelSpectrogram) -> Result<(Vec<u32>, Vec<u32>)> {
        let logits = self.forward(&self.input(&[mel])?)?;
        let logits = crate::model::from_tensor3(&logits)?;
        Ok((
            argmax_channels(&logits, 0, 0..PHONEME_VOCAB),
            argmax_channels(&logits, 0, PHONEME_VOCAB..PHONEME_VOCAB + PITCH_VOCAB),
        ))
    }

    /// Serializes the probe, tagged with the run's config hash.
    pub fn encode(&self, config_hash: &str) -> Result<Vec<u8>> {
        let json = serde_json::to_string(&self.cfg).expect("probe config serializes");
        self.params.encode_checkpoint(config_hash, 0, &json)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let ckpt = Checkpoint::decode(bytes)?;
        let cfg: ProbeConfig =
            serde_json::from_str(&ckpt.config_json).map_err(|e| Error::Format(format!("probe config: {e}")))?;
        let probe = Probe::new(cfg, 0)?;
        probe.params.load_tensors(&ckpt)?;
        Ok(probe)
    }
}

/// Mean of frame-level phoneme and pitch accuracy of the probe on `mel`
/// against `fc`.
pub fn label_recovery(mel: &MelSpectrogram, fc: &FrameConditions, probe: &Probe) -> Result<f64> {
    if mel.n_frames() != fc.n_frames() {
        return Err(Error::Domain(format!("mel has {} frames, conditions {}", mel.n_frames(), fc.n_frames())));
    }
    let (ph, pi) = probe.predict(mel)?;
    let acc = |pred: &[u32], truth: &[u32]| {
        pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len().max(1) as f64
    };
    Ok(0.5 * (acc(&ph, &fc.phoneme_ids) + acc(&pi, &fc.pitch_ids)))
}

/// Expected accuracy of predictions independent of the truth:
/// `Σ_k p_truth(k)·p_pred(k)` per stream, averaged over the two streams.
pub fn chance_level(truth: &[&FrameConditions], predicted: &[(Vec<u32>, Vec<u32>)]) -> f64 {
    fn agreement(truth: impl Iterator<Item = u32>, pred: impl Iterator<Item = u32>, vocab: usize) -> f64 {
        let hist = |it: &mut dyn Iterator<Item = u32>| {
            let mut h = vec![0.0; vocab];
            let mut n = 0.0;
            for id in it {
                h[id as usize] += 1.0;
                n += 1.0;
            }
            h.iter().map(|c| c / f64::max(n, 1.0)).collect::<Vec<_>>()
        };
        let (mut truth, mut pred) = (truth, pred);
        let (ht, hp) = (hist(&mut truth), hist(&mut pred));
        ht.iter().zip(&hp).map(|(a, b)| a * b).sum()
    }
    let ph = agreement(
        truth.iter().flat_map(|c| c.phoneme_ids.iter().copied()),
        predicted.iter().flat_map(|p| p.0.iter().copied()),
        PHONEME_VOCAB,
    );
    let pi = agreement(
        truth.iter().flat_map(|c| c.pitch_ids.iter().copied()),
        predicted.iter().flat_map(|p| p.1.iter().copied()),
        PITCH_VOCAB,
    );
    0.5 * (ph + pi)
}
