//! Run configuration: one flat TOML table of typed keys.
//!
//! Unknown keys are rejected. The config hash covers the audio front-end and
//! model settings, i.e. everything a checkpoint or prepared feature depends
//! on; training, guidance and sampler keys may change freely.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audiofeat::MelParams;
use crate::diffusion::{NoiseSchedule, SamplerConfig, SamplerKind};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // audio
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,

    // model
    pub text_hidden: usize,
    pub text_blocks: usize,
    pub text_heads: usize,
    pub text_ffn: usize,
    pub text_out: usize,
    pub prenet_kernel: usize,
    pub prenet_dropout: f64,
    pub attn_window: usize,
    pub pitch_dim: usize,
    pub speaker_dim: usize,
    pub n_speakers: usize,
    pub unet_channels: Vec<usize>,
    pub time_dim: usize,
    pub beta_0: f64,
    pub beta_1: f64,
    pub mel_mean: f64,
    pub mel_std: f64,
    pub sigma_data: f64,

    // training
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub checkpoint_every: usize,
    /// Random crop length in frames; 0 trains on whole utterances.
    pub train_frames: usize,
    pub p_text_mask: f64,
    pub p_both_mask: f64,
    pub p_pitch_mask: f64,
    /// Share of each batch drawn from labeled items; 0 samples all items
    /// uniformly.
    pub labeled_batch_fraction: f64,

    // guidance
    pub guidance_mode: GuidanceMode,
    pub w1: f64,
    pub w2: f64,
    pub norm_based: bool,
    pub eps_norm: f64,

    // sampler
    pub n_steps: usize,
    pub sampler: SamplerKind,
    pub t_min: f64,
    pub seed: u64,

    // synthetic corpus
    pub synth_items: usize,
    pub synth_labeled_fraction: f64,
    pub synth_frames: usize,
    pub synth_speakers: u32,
    pub synth_syllables: usize,
    pub synth_pitch_low: u8,
    pub synth_pitch_high: u8,

    // probe classifier
    pub probe_hidden: usize,
    pub probe_kernel: usize,
    pub probe_steps: usize,
    pub probe_lr: f64,

    // oracle check
    pub oracle_points: usize,

    // paths
    pub corpus_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let g = GuidanceConfig::default();
        let s = SamplerConfig::default();
        let y = SynthConfig::default();
        RunConfig {
            sample_rate: 22050,
            n_fft: 1024,
            hop: 256,
            n_mels: m.n_mels,
            text_hidden: m.text_hidden,
            text_blocks: m.text_blocks,
            text_heads: m.text_heads,
            text_ffn: m.text_ffn,
            text_out: m.text_out,
            prenet_kernel: m.prenet_kernel,
            prenet_dropout: m.prenet_dropout,
            attn_window: m.attn_window,
            pitch_dim: m.pitch_dim,
            speaker_dim: m.speaker_dim,
            n_speakers: m.n_speakers,
            unet_channels: m.unet_channels,
            time_dim: m.time_dim,
            beta_0: m.schedule.beta_0,
            beta_1: m.schedule.beta_1,
            mel_mean: m.mel_mean,
            mel_std: m.mel_std,
            sigma_data: m.sigma_data,
            batch_size: 16,
            lr: 1e-4,
            steps: 2000,
            checkpoint_every: 500,
            train_frames: 0,
            p_text_mask: 0.1,
            p_both_mask: 0.1,
            p_pitch_mask: 0.0,
            labeled_batch_fraction: 0.0,
            guidance_mode: g.mode,
            w1: g.w1,
            w2: g.w2,
            norm_based: g.norm_based,
            eps_norm: g.eps_norm,
            n_steps: s.n_steps,
            sampler: s.kind,
            t_min: s.t_min,
            seed: 0,
            synth_items: y.n_items,
            synth_labeled_fraction: y.labeled_fraction,
            synth_frames: y.frames,
            synth_speakers: y.n_speakers,
            synth_syllables: y.n_syllables,
            synth_pitch_low: y.pitch_low,
            synth_pitch_high: y.pitch_high,
            probe_hidden: 64,
            probe_kernel: 5,
            probe_steps: 400,
            probe_lr: 1e-3,
            oracle_points: 100,
            corpus_dir: None,
            manifest: None,
            checkpoint: None,
        }
    }
}

/// The hashed subset, serialized in a fixed field order.
#[derive(Serialize)]
struct HashScope<'a> {
    sample_rate: u32,
    n_fft: usize,
    hop: usize,
    model: &'a ModelConfig,
}

fn probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {p} is not a probability")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("sample_rate", self.sample_rate as usize),
            ("n_fft", self.n_fft),
            ("hop", self.hop),
            ("batch_size", self.batch_size),
            ("steps", self.steps),
            ("checkpoint_every", self.checkpoint_every),
            ("n_steps", self.n_steps),
            ("synth_items", self.synth_items),
            ("synth_frames", self.synth_frames),
            ("synth_speakers", self.synth_speakers as usize),
            ("synth_syllables", self.synth_syllables),
            ("probe_hidden", self.probe_hidden),
            ("probe_kernel", self.probe_kernel),
            ("probe_steps", self.probe_steps),
            ("oracle_points", self.oracle_points),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        probability("p_text_mask", self.p_text_mask)?;
        probability("p_both_mask", self.p_both_mask)?;
        probability("p_pitch_mask", self.p_pitch_mask)?;
        probability("labeled_batch_fraction", self.labeled_batch_fraction)?;
        if self.p_text_mask + self.p_both_mask + self.p_pitch_mask > 1.0 + 1e-12 {
            return Err(Error::Config("mask probabilities sum to more than 1".into()));
        }
        probability("synth_labeled_fraction", self.synth_labeled_fraction)?;
        if !(self.lr > 0.0 && self.probe_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Config("t_min must be in (0, 1)".into()));
        }
        if self.probe_kernel % 2 == 0 {
            return Err(Error::Config("probe_kernel must be odd".into()));
        }
        if self.synth_speakers as usize > self.n_speakers {
            return Err(Error::Config("synth_speakers exceeds n_speakers".into()));
        }
        self.model_config().validate()?;
        self.guidance().validate()?;
        self.synth_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_mels: self.n_mels,
            text_hidden: self.text_hidden,
            text_blocks: self.text_blocks,
            text_heads: self.text_heads,
            text_ffn: self.text_ffn,
            text_out: self.text_out,
            prenet_kernel: self.prenet_kernel,
            prenet_dropout: self.prenet_dropout,
            attn_window: self.attn_window,
            pitch_dim: self.pitch_dim,
            speaker_dim: self.speaker_dim,
            n_speakers: self.n_speakers,
            unet_channels: self.unet_channels.clone(),
            time_dim: self.time_dim,
            schedule: NoiseSchedule { beta_0: self.beta_0, beta_1: self.beta_1 },
            mel_mean: self.mel_mean,
            mel_std: self.mel_std,
            sigma_data: self.sigma_data,
        }
    }

    pub fn mel_params(&self) -> MelParams {
        MelParams {
            sample_rate: self.sample_rate,
            n_fft: self.n_fft,
            hop: self.hop,
            n_mels: self.n_mels,
            ..MelParams::default()
        }
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            mode: self.guidance_mode,
            w1: self.w1,
            w2: self.w2,
            norm_based: self.norm_based,
            eps_norm: self.eps_norm,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig { n_steps: self.n_steps, kind: self.sampler, seed: self.seed, t_min: self.t_min }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_items: self.synth_items,
            labeled_fraction: self.synth_labeled_fraction,
            frames: self.synth_frames,
            n_speakers: self.synth_speakers,
            n_syllables: self.synth_syllables,
            pitch_low: self.synth_pitch_low,
            pitch_high: self.synth_pitch_high,
            sample_rate: self.sample_rate,
            hop: self.hop,
            n_mels: self.n_mels,
        }
    }

    /// Hex SHA-256 over the audio and model settings.
    pub fn config_hash(&self) -> String {
        let model = self.model_config();
        let scope = HashScope { sample_rate: self.sample_rate, n_fft: self.n_fft, hop: self.hop, model: &model };
        let json = serde_json::to_string(&scope).expect("hash scope serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
        assert_eq!(cfg.config_hash().len(), 64);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml_str("steps = 10\nguidance_mode = \"single\"\nsampler = \"ode\"\n").unwrap();
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.guidance().mode, GuidanceMode::Single);
        assert_eq!(cfg.sampler_config().kind, SamplerKind::Ode);
        assert_eq!(cfg.w1, 0.2);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = RunConfig::from_toml_str("stepz = 10\n").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("stepz")), "{err}");
    }

    #[test]
    fn invariants_are_enforced() {
        for text in [
            "p_text_mask = 0.6\np_both_mask = 0.5\n",
            "p_pitch_mask = -0.1\n",
            "batch_size = 0\n",
            "n_steps = 0\n",
            "w1 = -1.0\n",
            "text_heads = 3\n",
            "guidance_mode = \"triple\"\n",
        ] {
            assert!(RunConfig::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn hash_ignores_runtime_keys() {
        let base = RunConfig::default();
        let sampling = RunConfig { w1: 0.5, n_steps: 10, seed: 3, steps: 7, p_text_mask: 0.3, ..base.clone() };
        assert_eq!(base.config_hash(), sampling.config_hash());
        let wider = RunConfig { text_hidden: 64, ..base.clone() };
        assert_ne!(base.config_hash(), wider.config_hash());
        let schedule = RunConfig { beta_1: 10.0, ..base.clone() };
        assert_ne!(base.config_hash(), schedule.config_hash());
    }
}
