//! Semi-supervised versus supervised comparison on the synthetic corpus.
//!
//! One replicate trains two checkpoints from the same corpus: a
//! semi-supervised one on every item (unlabeled items fully masked) and a
//! supervised one on the labeled share alone with masking switched off.
//! Held-out scores are then sampled under several guidance settings and
//! scored against the generator's references.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::diffusion::SamplerConfig;
use crate::audiofeat::{F0Track, MelSpectrogram};
use crate::evalkit::{label_recovery, mel_f0, semitone_accuracy, Probe};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::model::ScoreModel;
use crate::labelkit::{expand_labels, FrameConditions, Labeling};
use crate::pipeline::{probe_config, sample_mels, train_model, TrainItem};
use crate::synth::{generate_corpus, SynthConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmMetrics {
    /// Semitone accuracy pooled over voiced frames of all held-out items.
    pub s_acc: f64,
    /// Mean probe recovery over held-out items.
    pub label_recovery: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub seed: u64,
    pub dual: ArmMetrics,
    pub single: ArmMetrics,
    pub none: ArmMetrics,
    pub supervised: ArmMetrics,
    pub semi_final_loss: f64,
    pub supervised_final_loss: f64,
}

fn train_items(cfg: &RunConfig, synth: &SynthConfig, seed: u64) -> Result<Vec<TrainItem>> {
    let model_cfg = cfg.model_config();
    generate_corpus(synth, seed)?
        .into_iter()
        .map(|it| {
            let conds = expand_labels(&it.observed, it.mel.n_frames(), cfg.sample_rate, cfg.hop as u32)?;
            Ok(TrainItem { id: it.id, x0: model_cfg.normalize(&it.mel), conds, labeling: it.observed.labeling })
        })
        .collect()
}

/// Held-out references: fully labeled items from an independent stream.
pub fn held_out(cfg: &RunConfig, n: usize, seed: u64) -> Result<Vec<(MelSpectrogram, FrameConditions)>> {
    let synth = SynthConfig { n_items: n, labeled_fraction: 1.0, ..cfg.synth_config() };
    generate_corpus(&synth, seed)?
        .into_iter()
        .map(|it| Ok((it.mel.clone(), expand_labels(&it.label, it.mel.n_frames(), cfg.sample_rate, cfg.hop as u32)?)))
        .collect()
}

/// Trains the evaluation probe on a fully labeled synthetic corpus.
pub fn train_probe(cfg: &RunConfig, n_items: usize, seed: u64) -> Result<Probe> {
    let data = held_out(cfg, n_items, seed)?;
    let mut probe = Probe::new(probe_config(cfg), seed)?;
    probe.train(&data, seed)?;
    Ok(probe)
}

fn score_arm(
    model: &ScoreModel,
    refs: &[(MelSpectrogram, FrameConditions)],
    guidance: &GuidanceConfig,
    sc: &SamplerConfig,
    probe: &Probe,
) -> Result<ArmMetrics> {
    let conds: Vec<FrameConditions> = refs.iter().map(|(_, fc)| fc.clone()).collect();
    let gens = sample_mels(model, &conds, guidance, sc)?;
    let mut ref_f0 = Vec::new();
    let mut gen_f0 = Vec::new();
    let mut recovery = 0.0;
    for ((r, fc), g) in refs.iter().zip(&gens) {
        ref_f0.extend(mel_f0(r).f0_hz);
        gen_f0.extend(mel_f0(g).f0_hz);
        recovery += label_recovery(g, fc, probe)?;
    }
    let s_acc = semitone_accuracy(
        &F0Track::new(ref_f0),
        &F0Track::new(gen_f0),
    )?
    .unwrap_or(0.0);
    Ok(ArmMetrics { s_acc, label_recovery: recovery / refs.len() as f64 })
}

/// Runs one replicate: both trainings, then the four sampling arms on
/// `n_eval` held-out items with shared sampler noise.
pub fn run_replicate(cfg: &RunConfig, n_eval: usize, seed: u64, probe: &Probe) -> Result<Replicate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let synth = cfg.synth_config();
    let items = train_items(cfg, &synth, rng.random())?;
    if !items.iter().any(|it| it.labeling == Labeling::Full) {
        return Err(Error::Precondition("corpus has no labeled items".into()));
    }
    let train_seed: u64 = rng.random();
    let semi = train_model(cfg, &items, train_seed, |_, _, _| Ok(()))?;
    let labeled: Vec<TrainItem> = items.iter().filter(|it| it.labeling == Labeling::Full).cloned().collect();
    let sup_cfg = RunConfig { p_text_mask: 0.0, p_both_mask: 0.0, p_pitch_mask: 0.0, ..cfg.clone() };
    let sup = train_model(&sup_cfg, &labeled, train_seed, |_, _, _| Ok(()))?;

    let refs = held_out(cfg, n_eval, rng.random())?;
    let sc = SamplerConfig { seed: rng.random(), ..cfg.sampler_config() };
    let g = cfg.guidance();
    let dual = GuidanceConfig { mode: GuidanceMode::DualPitchAnchored, ..g };
    let single = GuidanceConfig { mode: GuidanceMode::Single, ..g };
    let none = GuidanceConfig { mode: GuidanceMode::None, ..g };
    let tail = |l: &[f64]| {
        let k = l.len().min(50);
        l[l.len() - k..].iter().sum::<f64>() / k.max(1) as f64
    };
    Ok(Replicate {
        seed,
        dual: score_arm(&semi.model, &refs, &dual, &sc, probe)?,
        single: score_arm(&semi.model, &refs, &single, &sc, probe)?,
        none: score_arm(&semi.model, &refs, &none, &sc, probe)?,
        supervised: score_arm(&sup.model, &refs, &none, &sc, probe)?,
        semi_final_loss: tail(&semi.losses),
        supervised_final_loss: tail(&sup.losses),
    })
}

/// One-sided sign test: probability of at least `wins` successes in `n`
/// fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut c = 1.0f64;
    let mut tail = if wins == 0 { 1.0 } else { 0.0 };
    for k in 1..=n {
        c = c * (n - k + 1) as f64 / k as f64;
        if k >= wins {
            tail += c;
        }
    }
    tail / 2f64.powi(n as i32)
}
