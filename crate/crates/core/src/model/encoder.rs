//! Condition encoder: text branch (embedding → conv pre-net → self-attention
//! blocks → projection), pitch and speaker lookup tables, concatenated along
//! the feature axis. It produces conditioning features only; there is no
//! prior mean or variance head.

use candle_core::{Device, Tensor, D};

use super::layers::{dropout, silu, sinusoidal, softmax_last, Conv1d, Ctx, Embedding, LayerNorm, Linear};
use super::params::ParamStore;
use super::ModelConfig;
use crate::labelkit::{FrameConditions, PHONEME_VOCAB, PITCH_VOCAB};
use crate::{Error, Result};

const MASKED: f64 = -1e9;

struct TransformerBlock {
    qkv: Linear,
    out: Linear,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

impl TransformerBlock {
    fn new(ps: &mut ParamStore, name: &str, hidden: usize, ffn: usize) -> Result<Self> {
        Ok(TransformerBlock {
            qkv: Linear::new(ps, &format!("{name}.attn.qkv"), hidden, 3 * hidden)?,
            out: Linear::new(ps, &format!("{name}.attn.out"), hidden, hidden)?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), hidden)?,
            ff1: Linear::new(ps, &format!("{name}.ffn.0"), hidden, ffn)?,
            ff2: Linear::new(ps, &format!("{name}.ffn.1"), ffn, hidden)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), hidden)?,
        })
    }

    /// `x`: `(B, T, H)`; `bias`: additive attention mask `(B, 1, T, T)`.
    fn forward(&self, x: &Tensor, bias: &Tensor, heads: usize) -> Result<Tensor> {
        let (b, t, h) = x.dims3()?;
        let dh = h / heads;
        let qkv = self.qkv.forward(x)?.reshape((b, t, 3, heads, dh))?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?.broadcast_add(bias)?;
        let attn = softmax_last(&scores)?.matmul(&v)?;
        let attn = attn.transpose(1, 2)?.reshape((b, t, h))?;
        let x = self.norm1.forward(&(x + self.out.forward(&attn)?)?)?;
        let ff = self.ff2.forward(&silu(&self.ff1.forward(&x)?)?)?;
        self.norm2.forward(&(x + ff)?)
    }
}

pub struct ConditionEncoder {
    phoneme_emb: Embedding,
    prenet: [Conv1d; 2],
    prenet_dropout: f64,
    blocks: Vec<TransformerBlock>,
    proj: Linear,
    pitch_emb: Embedding,
    speaker_emb: Embedding,
    hidden: usize,
    heads: usize,
    window: usize,
    n_speakers: usize,
}

fn id_tensor(rows: &[&[u32]], device: &Device) -> Result<Tensor> {
    let t = rows[0].len();
    let flat: Vec<u32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (rows.len(), t), device)?)
}

impl ConditionEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.text_hidden;
        let k = cfg.prenet_kernel;
        Ok(ConditionEncoder {
            phoneme_emb: Embedding::new(ps, "text.embedding", PHONEME_VOCAB, h)?,
            prenet: [
                Conv1d::new(ps, "text.prenet.0", h, h, k)?,
                Conv1d::new(ps, "text.prenet.1", h, h, k)?,
            ],
            prenet_dropout: cfg.prenet_dropout,
            blocks: (0..cfg.text_blocks)
                .map(|i| TransformerBlock::new(ps, &format!("text.block{i}"), h, cfg.text_ffn))
                .collect::<Result<_>>()?,
            proj: Linear::new(ps, "text.proj", h, cfg.text_out)?,
            pitch_emb: Embedding::new(ps, "pitch.embedding", PITCH_VOCAB, cfg.pitch_dim)?,
            speaker_emb: Embedding::new(ps, "speaker.embedding", cfg.n_speakers, cfg.speaker_dim)?,
            hidden: h,
            heads: cfg.text_heads,
            window: cfg.attn_window,
            n_speakers: cfg.n_speakers,
        })
    }

    pub fn check_vocab(&self, fc: &FrameConditions) -> Result<()> {
        if fc.pitch_ids.len() != fc.phoneme_ids.len() {
            return Err(Error::Domain("phoneme and pitch sequences differ in length".into()));
        }
        if let Some(p) = fc.phoneme_ids.iter().find(|&&p| p as usize >= PHONEME_VOCAB) {
            return Err(Error::Domain(format!("phoneme id {p} outside vocabulary")));
        }
        if let Some(p) = fc.pitch_ids.iter().find(|&&p| p as usize >= PITCH_VOCAB) {
            return Err(Error::Domain(format!("pitch id {p} outside vocabulary")));
        }
        if fc.speaker_id as usize >= self.n_speakers {
            return Err(Error::Domain(format!("speaker id {} outside 0..{}", fc.speaker_id, self.n_speakers)));
        }
        Ok(())
    }

    fn attention_bias(&self, b: usize, t: usize, lengths: &[usize], ps: &ParamStore) -> Result<Tensor> {
        let mut data = vec![0.0f64; b * t * t];
        for (bi, &len) in lengths.iter().enumerate() {
            for i in 0..t {
                for j in 0..t {
                    let outside_window = self.window > 0 && i.abs_diff(j) > self.window;
                    if outside_window || j >= len {
                        data[(bi * t + i) * t + j] = MASKED;
                    }
                }
            }
        }
        Ok(Tensor::from_vec(data, (b, 1, t, t), ps.device())?.to_dtype(ps.dtype())?)
    }

    /// Encodes equal-length conditions to `(B, D_c, T)`; frames at or beyond
    /// `lengths[b]` are excluded as attention keys.
    pub fn forward(&self, conds: &[FrameConditions], lengths: &[usize], ps: &ParamStore, ctx: &mut Ctx) -> Result<Tensor> {
        let b = conds.len();
        let t = conds.first().map_or(0, |c| c.n_frames());
        if b == 0 || t == 0 || conds.iter().any(|c| c.n_frames() != t) {
            return Err(Error::Domain("encoder needs a non-empty batch of equal-length conditions".into()));
        }
        for fc in conds {
            self.check_vocab(fc)?;
        }
        let device = ps.device();
        let phonemes = id_tensor(&conds.iter().map(|c| c.phoneme_ids.as_slice()).collect::<Vec<_>>(), device)?;
        let pitches = id_tensor(&conds.iter().map(|c| c.pitch_ids.as_slice()).collect::<Vec<_>>(), device)?;
        let speakers = Tensor::from_vec(conds.iter().map(|c| c.speaker_id).collect::<Vec<u32>>(), b, device)?;

        // text branch
        let mut x = self.phoneme_emb.forward(&phonemes)?.transpose(1, 2)?; // (B, H, T)
        for conv in &self.prenet {
            x = dropout(&silu(&conv.forward(&x)?)?, self.prenet_dropout, ctx)?;
        }
        let positions: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let pe = sinusoidal(&positions, self.hidden, ps.dtype(), device)?;
        let mut x = x.transpose(1, 2)?.broadcast_add(&pe)?; // (B, T, H)
        let bias = self.attention_bias(b, t, lengths, ps)?;
        for block in &self.blocks {
            x = block.forward(&x, &bias, self.heads)?;
        }
        let text = self.proj.forward(&x)?.transpose(1, 2)?;

        let pitch = self.pitch_emb.forward(&pitches)?.transpose(1, 2)?;
        let speaker = self.speaker_emb.forward(&speakers)?.unsqueeze(D::Minus1)?;
        let speaker = speaker.broadcast_as((b, speaker.dim(1)?, t))?;
        Ok(Tensor::cat(&[&text, &pitch, &speaker], 1)?.contiguous()?)
    }
}
