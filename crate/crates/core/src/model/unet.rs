//! Temporal U-Net noise predictor. Mel bins are input channels; each
//! resolution halves the frame axis. A sinusoidal time embedding enters
//! every residual block as a per-channel bias. There is no normalization
//! across frames, so the output at a frame depends only on a bounded
//! neighbourhood of the input.

use candle_core::Tensor;

use super::layers::{silu, sinusoidal, Conv1d, Linear};
use super::params::ParamStore;
use super::ModelConfig;
use crate::{Error, Result};

/// Output layer scale: near-zero noise prediction at initialization.
const OUT_INIT_SCALE: f64 = 0.01;
/// Times are stretched before the sinusoidal embedding.
const TIME_SCALE: f64 = 1000.0;

struct ResBlock {
    conv1: Conv1d,
    time: Linear,
    conv2: Conv1d,
    skip: Option<Conv1d>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, time_dim: usize) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv1d::new(ps, &format!("{name}.conv1"), c_in, c_out, 3)?,
            time: Linear::new(ps, &format!("{name}.time"), time_dim, c_out)?,
            conv2: Conv1d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3)?,
            skip: if c_in != c_out {
                Some(Conv1d::new(ps, &format!("{name}.skip"), c_in, c_out, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(x)?)?;
        let h = h.broadcast_add(&self.time.forward(temb)?.unsqueeze(2)?)?;
        let h = self.conv2.forward(&silu(&h)?)?;
        let residual = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((h + residual)?)
    }
}

fn downsample(x: &Tensor) -> Result<Tensor> {
    let (b, c, t) = x.dims3()?;
    Ok(x.reshape((b, c, t / 2, 2))?.mean(3)?)
}

fn upsample(x: &Tensor) -> Result<Tensor> {
    let (b, c, t) = x.dims3()?;
    Ok(x.unsqueeze(3)?.broadcast_as((b, c, t, 2))?.reshape((b, c, 2 * t))?)
}

pub struct ScoreUNet {
    input: Conv1d,
    time_mlp: [Linear; 2],
    time_dim: usize,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    output: Conv1d,
}

impl ScoreUNet {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let ch = &cfg.unet_channels;
        if ch.is_empty() {
            return Err(Error::Config("U-Net needs at least one resolution".into()));
        }
        let td = cfg.time_dim;
        let input = Conv1d::new(ps, "unet.input", cfg.n_mels + cfg.cond_dim(), ch[0], 3)?;
        let time_mlp = [
            Linear::new(ps, "unet.time.0", td, 2 * td)?,
            Linear::new(ps, "unet.time.1", 2 * td, td)?,
        ];
        let mut down = Vec::new();
        let mut c_prev = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            down.push(ResBlock::new(ps, &format!("unet.down{i}"), c_prev, c, td)?);
            c_prev = c;
        }
        let last = *ch.last().unwrap();
        let mid = ResBlock::new(ps, "unet.mid", last, last, td)?;
        let mut up = Vec::new();
        let mut c_prev = last;
        for i in (0..ch.len()).rev() {
            up.push(ResBlock::new(ps, &format!("unet.up{i}"), c_prev + ch[i], ch[i], td)?);
            c_prev = ch[i];
        }
        let output = Conv1d::with_scale(ps, "unet.output", ch[0], cfg.n_mels, 1, OUT_INIT_SCALE)?;
        Ok(ScoreUNet { input, time_mlp, time_dim: td, down, mid, up, output })
    }

    /// Frame counts must be multiples of this.
    pub fn frame_multiple(&self) -> usize {
        1 << (self.down.len() - 1)
    }

    /// Predicts the noise in `x` (`(B, n_mels, T)`) given conditioning
    /// features `(B, D_c, T)` and per-item times; `T` must be a multiple of
    /// [`Self::frame_multiple`].
    pub fn forward(&self, x: &Tensor, cond: &Tensor, times: &[f64], ps: &ParamStore) -> Result<Tensor> {
        let scaled: Vec<f64> = times.iter().map(|t| t * TIME_SCALE).collect();
        let temb = sinusoidal(&scaled, self.time_dim, ps.dtype(), ps.device())?;
        let temb = self.time_mlp[1].forward(&silu(&self.time_mlp[0].forward(&temb)?)?)?;
        let temb = silu(&temb)?;

        let mut h = self.input.forward(&Tensor::cat(&[x, cond], 1)?)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, block) in self.down.iter().enumerate() {
            h = block.forward(&h, &temb)?;
            skips.push(h.clone());
            if i + 1 < self.down.len() {
                h = downsample(&h)?;
            }
        }
        h = self.mid.forward(&h, &temb)?;
        let levels = self.down.len();
        for (j, block) in self.up.iter().enumerate() {
            let level = levels - 1 - j;
            if level + 1 < levels {
                h = upsample(&h)?;
            }
            h = block.forward(&Tensor::cat(&[&h, &skips[level]], 1)?, &temb)?;
        }
        self.output.forward(&silu(&h)?)
    }
}
