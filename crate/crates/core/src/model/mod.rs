//! Conditional score estimator: condition encoder plus temporal U-Net.
//!
//! The U-Net predicts the perturbation noise; the score is recovered as
//! `−ε̂ / sqrt(var(t))`, which makes the variance-weighted score-matching
//! loss a plain noise regression.

mod encoder;
pub(crate) mod layers;
mod params;
mod train;
mod unet;

pub use layers::Ctx;
pub use params::{Checkpoint, ParamStore};
pub use train::{finite_difference_check, Adam, Batch, GradCheck, LossNoise, Trainer, TRAIN_T_MIN};

use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::audiofeat::MelSpectrogram;
use crate::diffusion::NoiseSchedule;
use crate::guidance::ScoreSource;
use crate::labelkit::FrameConditions;
use crate::{Error, Result};
use encoder::ConditionEncoder;
use unet::ScoreUNet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub text_hidden: usize,
    pub text_blocks: usize,
    pub text_heads: usize,
    pub text_ffn: usize,
    pub text_out: usize,
    pub prenet_kernel: usize,
    pub prenet_dropout: f64,
    /// Attention half-width in frames; 0 attends globally.
    pub attn_window: usize,
    pub pitch_dim: usize,
    pub speaker_dim: usize,
    pub n_speakers: usize,
    pub unet_channels: Vec<usize>,
    pub time_dim: usize,
    pub schedule: NoiseSchedule,
    /// Affine mel normalization applied before diffusion.
    pub mel_mean: f64,
    pub mel_std: f64,
    /// Spread assumed for clean normalized data when blending the network
    /// output with the state (denoiser preconditioning).
    pub sigma_data: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_mels: 80,
            text_hidden: 128,
            text_blocks: 4,
            text_heads: 2,
            text_ffn: 256,
            text_out: 64,
            prenet_kernel: 5,
            prenet_dropout: 0.1,
            attn_window: 0,
            pitch_dim: 32,
            speaker_dim: 16,
            n_speakers: 92,
            unet_channels: vec![64, 128, 256],
            time_dim: 64,
            schedule: NoiseSchedule::default(),
            mel_mean: -5.0,
            mel_std: 2.5,
            sigma_data: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn cond_dim(&self) -> usize {
        self.text_out + self.pitch_dim + self.speaker_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_mels", self.n_mels),
            ("text_hidden", self.text_hidden),
            ("text_heads", self.text_heads),
            ("text_ffn", self.text_ffn),
            ("text_out", self.text_out),
            ("prenet_kernel", self.prenet_kernel),
            ("pitch_dim", self.pitch_dim),
            ("speaker_dim", self.speaker_dim),
            ("n_speakers", self.n_speakers),
            ("time_dim", self.time_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.text_hidden % self.text_heads != 0 {
            return Err(Error::Config("text_hidden must be divisible by text_heads".into()));
        }
        if self.prenet_kernel % 2 == 0 {
            return Err(Error::Config("prenet_kernel must be odd".into()));
        }
        if self.unet_channels.is_empty() || self.unet_channels.contains(&0) {
            return Err(Error::Config("unet_channels must be non-empty and positive".into()));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::Config("prenet_dropout must be in [0, 1)".into()));
        }
        if !(self.mel_std > 0.0) {
            return Err(Error::Config("mel_std must be positive".into()));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::Config("sigma_data must be positive".into()));
        }
        NoiseSchedule::new(self.schedule.beta_0, self.schedule.beta_1)?;
        Ok(())
    }

    /// Log-mel → diffusion space.
    pub fn normalize(&self, mel: &MelSpectrogram) -> Array2<f64> {
        mel.values.mapv(|v| (v as f64 - self.mel_mean) / self.mel_std)
    }

    /// Diffusion space → log-mel.
    pub fn denormalize(&self, x: ArrayView2<f64>) -> MelSpectrogram {
        MelSpectrogram::new(x.mapv(|v| (v * self.mel_std + self.mel_mean) as f32))
    }
}

/// Encoded conditions, `D_c × T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub features: Array2<f64>,
}

pub struct ScoreModel {
    cfg: ModelConfig,
    params: ParamStore,
    encoder: ConditionEncoder,
    unet: ScoreUNet,
}

pub fn to_tensor3(x: &Array3<f64>, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = x.iter().copied().collect();
    Ok(Tensor::from_vec(data, x.dim(), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

pub fn from_tensor3(t: &Tensor) -> Result<Array3<f64>> {
    let dims = t.dims3()?;
    let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Array3::from_shape_vec(dims, data).map_err(|e| Error::Domain(e.to_string()))
}

impl ScoreModel {
    /// Freshly initialized model; `seed` fixes every initial weight.
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(seed, dtype);
        let encoder = ConditionEncoder::new(&mut params, &cfg)?;
        let unet = ScoreUNet::new(&mut params, &cfg)?;
        Ok(ScoreModel { cfg, params, encoder, unet })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.n_params()
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Encodes a batch of equal-length conditions to `(B, D_c, T)`.
    pub fn encode_batch(&self, conds: &[FrameConditions], lengths: &[usize], ctx: &mut Ctx) -> Result<Tensor> {
        self.encoder.forward(conds, lengths, &self.params, ctx)
    }

    pub fn encode_conditions(&self, fc: &FrameConditions) -> Result<ConditionEmbedding> {
        let e = self.encode_batch(std::slice::from_ref(fc), &[fc.n_frames()], &mut Ctx::eval())?;
        let e = from_tensor3(&e)?;
        Ok(ConditionEmbedding { features: e.index_axis_move(ndarray::Axis(0), 0) })
    }

    /// Scores `(B, n_mels, T)` states from embeddings `(B, D_c, T)`.
    pub fn score_from_embedding(&self, x: &Tensor, emb: &Tensor, times: &[f64]) -> Result<Tensor> {
        let (b, rows, t) = x.dims3()?;
        if rows != self.cfg.n_mels || emb.dims3()? != (b, self.cfg.cond_dim(), t) || times.len() != b {
            return Err(Error::Domain(format!(
                "shape mismatch: state {:?}, embedding {:?}, {} times",
                x.dims(),
                emb.dims(),
                times.len()
            )));
        }
        if let Some(bad) = times.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::Domain(format!("t = {bad} outside (0, 1]")));
        }
        let multiple = self.unet.frame_multiple();
        let padded = t.div_ceil(multiple) * multiple;
        let (x, emb) = if padded != t {
            (x.pad_with_zeros(2, 0, padded - t)?, emb.pad_with_zeros(2, 0, padded - t)?)
        } else {
            (x.clone(), emb.clone())
        };
        let f = self.unet.forward(&x, &emb, times, &self.params)?.narrow(2, 0, t)?;
        let x = x.narrow(2, 0, t)?;
        // x̂0 = c_skip·x + c_out·F with the variance-matched blend; the score
        // (μ·x̂0 − x)/σ² then reduces to −x/d + μ·σ_d/(σ·√d)·F, d = μ²σ_d² + σ²
        let sd2 = self.cfg.sigma_data * self.cfg.sigma_data;
        let mut cx = Vec::with_capacity(b);
        let mut cf = Vec::with_capacity(b);
        for &t in times {
            let st = self.cfg.schedule.noise_stats(t)?;
            let d = st.mean_coef * st.mean_coef * sd2 + st.var;
            cx.push(-1.0 / d);
            cf.push(st.mean_coef * self.cfg.sigma_data / (st.var * d).sqrt());
        }
        let coef = |v: Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (b, 1, 1), x.device())?.to_dtype(self.dtype())?)
        };
        Ok((x.broadcast_mul(&coef(cx)?)? + f.broadcast_mul(&coef(cf)?)?)?)
    }

    /// Single-item score `s_θ(X_t, e, t)`, shape of `x_t`.
    pub fn estimate_score(&self, x_t: ArrayView2<f64>, e: &ConditionEmbedding, t: f64) -> Result<Array2<f64>> {
        if x_t.ncols() != e.features.ncols() {
            return Err(Error::Domain(format!(
                "state has {} frames, embedding {}",
                x_t.ncols(),
                e.features.ncols()
            )));
        }
        let x = to_tensor3(&x_t.to_owned().insert_axis(ndarray::Axis(0)), self.dtype())?;
        let emb = to_tensor3(&e.features.clone().insert_axis(ndarray::Axis(0)), self.dtype())?;
        let s = self.score_from_embedding(&x, &emb, &[t])?;
        Ok(from_tensor3(&s)?.index_axis_move(ndarray::Axis(0), 0))
    }

    pub fn encode_checkpoint(&self, config_hash: &str, step: u64) -> Result<Vec<u8>> {
        let json = serde_json::to_string(&self.cfg).expect("model config serializes");
        self.params.encode_checkpoint(config_hash, step, &json)
    }

    pub fn save_checkpoint(&self, path: &Path, config_hash: &str, step: u64) -> Result<()> {
        let bytes = self.encode_checkpoint(config_hash, step)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds a model from a checkpoint's embedded config and tensors.
    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| Error::Format(format!("checkpoint model config: {e}")))?;
        let model = ScoreModel::new(cfg, 0, dtype)?;
        model.params.load_tensors(ckpt)?;
        Ok(model)
    }
}

impl ScoreSource for ScoreModel {
    fn scores(&self, x: &Array3<f64>, conds: &[FrameConditions], t: f64) -> Result<Array3<f64>> {
        let (b, _, frames) = x.dim();
        if conds.len() != b {
            return Err(Error::Domain("batch size differs from condition count".into()));
        }
        let emb = self.encode_batch(conds, &vec![frames; b], &mut Ctx::eval())?;
        let s = self.score_from_embedding(&to_tensor3(x, self.dtype())?, &emb, &vec![t; b])?;
        from_tensor3(&s)
    }
}
