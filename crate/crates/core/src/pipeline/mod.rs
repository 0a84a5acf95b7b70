//! File-level pipeline behind the command-line subcommands.
//!
//! Every artifact carries the config hash of [`RunConfig::config_hash`];
//! readers refuse artifacts produced under a different hash.

mod manifest;

pub use manifest::{CondFile, Manifest, ManifestEntry};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::DType;
use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::audiofeat::{load_mel, mel_spectrogram_with, save_mel, MelSpectrogram, Waveform};
use crate::config::RunConfig;
use crate::diffusion::{sample_with, SamplerConfig};
use crate::evalkit::{label_recovery, mel_f0, EvalReport, Probe, ProbeConfig, Segment};
use crate::guidance::GuidanceConfig;
use crate::labelkit::{
    expand_labels, mask_conditions, note_to_frames, parse_label_file, FrameConditions, Labeling, MaskTarget,
    ScoreLabel,
};
use crate::model::{Batch, Checkpoint, ScoreModel, Trainer};
use crate::oracle::{MixtureOracle, ResidualReport};
use crate::synth::{generate_corpus, render_mel, write_corpus};
use crate::{Error, Result};

/// Training and inference run in single precision.
pub const MODEL_DTYPE: DType = DType::F32;

/// Share of items allowed to fail in `prepare` before the run is refused.
const MAX_FAILURE_RATE: f64 = 0.1;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn check_hash(expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::HashMismatch { expected: expected.to_string(), found: found.to_string() })
    }
}

fn stable_seed(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Frame count implied by a label: the end frame of its last note.
pub fn label_frames(label: &ScoreLabel, cfg: &RunConfig) -> Result<usize> {
    let mut frames = 1;
    for n in &label.notes {
        frames = frames.max(note_to_frames(n.start_sec, n.end_sec, cfg.sample_rate, cfg.hop as u32)?.1);
    }
    Ok(frames)
}

fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

// ---------------------------------------------------------------- prepare

#[derive(Debug, Clone)]
pub struct PrepareReport {
    pub manifest: PathBuf,
    pub n_items: usize,
    /// `(item id, reason)` for skipped items.
    pub failures: Vec<(String, String)>,
}

fn prepare_item(cfg: &RunConfig, lab_path: &Path) -> Result<(MelSpectrogram, ScoreLabel)> {
    let bytes = std::fs::read(lab_path).map_err(|e| Error::io(lab_path, e))?;
    let label = parse_label_file(&bytes)?;
    let mel_path = lab_path.with_extension("mel");
    let wav_path = lab_path.with_extension("wav");
    let mel = if mel_path.exists() {
        load_mel(&mel_path)?
    } else if wav_path.exists() {
        mel_spectrogram_with(&Waveform::read_wav(&wav_path)?, &cfg.mel_params())?
    } else if label.labeling == Labeling::Full {
        let frames = label_frames(&label, cfg)?;
        render_mel(&label, frames, &cfg.synth_config(), stable_seed(&stem(lab_path)))?
    } else {
        return Err(Error::Precondition("no .mel or .wav and the label is not fully labeled".into()));
    };
    if mel.n_mels() != cfg.n_mels {
        return Err(Error::Precondition(format!("mel has {} bands, config {}", mel.n_mels(), cfg.n_mels)));
    }
    Ok((mel, label))
}

/// Turns a corpus directory of `<id>.lab` files (each optionally with
/// `<id>.mel` or `<id>.wav`) into features plus a manifest under `out`.
pub fn cmd_prepare(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<PrepareReport> {
    let labs = files_with_extension(corpus, "lab")?;
    if labs.is_empty() {
        return Err(Error::Precondition(format!("no .lab files in {}", corpus.display())));
    }
    let features = out.join("features");
    create_dir(&features)?;
    let hash = cfg.config_hash();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for lab in &labs {
        let id = stem(lab);
        let prepared = prepare_item(cfg, lab).and_then(|(mel, label)| {
            let fc = expand_labels(&label, mel.n_frames(), cfg.sample_rate, cfg.hop as u32)?;
            Ok((mel, label, fc))
        });
        let (mel, label, fc) = match prepared {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping {id}: {e}");
                failures.push((id, e.to_string()));
                continue;
            }
        };
        let mel_rel = PathBuf::from("features").join(format!("{id}.mel"));
        let cond_rel = PathBuf::from("features").join(format!("{id}.cond"));
        save_mel(&out.join(&mel_rel), &mel)?;
        CondFile { config_hash: hash.clone(), labeling: label.labeling, conditions: fc }.save(&out.join(&cond_rel))?;
        entries.push(ManifestEntry {
            id,
            labeling: label.labeling,
            speaker_id: label.speaker_id,
            frames: mel.n_frames(),
            mel: mel_rel,
            cond: cond_rel,
        });
    }
    if failures.len() as f64 > MAX_FAILURE_RATE * labs.len() as f64 {
        let list: Vec<String> = failures.iter().map(|(id, why)| format!("{id}: {why}")).collect();
        return Err(Error::Precondition(format!(
            "{} of {} items failed:\n  {}",
            failures.len(),
            labs.len(),
            list.join("\n  ")
        )));
    }
    let manifest = Manifest { config_hash: hash, entries };
    let path = out.join("manifest.tsv");
    manifest.save(&path)?;
    Ok(PrepareReport { manifest: path, n_items: manifest.entries.len(), failures })
}

/// Writes a synthetic corpus (labels plus rendered mels) to `out`.
pub fn cmd_synth_corpus(cfg: &RunConfig, out: &Path, seed: u64) -> Result<usize> {
    let items = generate_corpus(&cfg.synth_config(), seed)?;
    write_corpus(&items, out)?;
    Ok(items.len())
}

// ---------------------------------------------------------------- train

/// Per-item stochastic masking of labeled data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPolicy {
    pub p_text_mask: f64,
    pub p_both_mask: f64,
    pub p_pitch_mask: f64,
}

impl MaskPolicy {
    pub fn from_config(cfg: &RunConfig) -> Self {
        MaskPolicy { p_text_mask: cfg.p_text_mask, p_both_mask: cfg.p_both_mask, p_pitch_mask: cfg.p_pitch_mask }
    }

    /// Mask to apply, if any. Unlabeled items are always fully masked;
    /// every other item consumes exactly one uniform draw.
    pub fn choose(&self, labeling: Labeling, rng: &mut impl Rng) -> Option<MaskTarget> {
        if labeling == Labeling::None {
            return Some(MaskTarget::None);
        }
        let u: f64 = rng.random();
        if u < self.p_text_mask {
            Some(MaskTarget::PitchOnly)
        } else if u < self.p_text_mask + self.p_both_mask {
            Some(MaskTarget::None)
        } else if u < self.p_text_mask + self.p_both_mask + self.p_pitch_mask {
            Some(MaskTarget::TextOnly)
        } else {
            None
        }
    }
}

/// Endless reshuffled pass over a pool of indices.
struct Cycler {
    order: Vec<usize>,
    cursor: usize,
}

impl Cycler {
    fn new(order: Vec<usize>) -> Self {
        let cursor = order.len();
        Cycler { order, cursor }
    }

    fn next(&mut self, rng: &mut impl Rng) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// One prepared utterance in model space.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    /// Normalized mel.
    pub x0: Array2<f64>,
    pub conds: FrameConditions,
    pub labeling: Labeling,
}

/// Loads a manifest's items, refusing a foreign config hash.
pub fn load_items(cfg: &RunConfig, manifest_path: &Path) -> Result<Vec<TrainItem>> {
    let manifest = Manifest::load(manifest_path)?;
    let hash = cfg.config_hash();
    check_hash(&hash, &manifest.config_hash)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let model_cfg = cfg.model_config();
    manifest
        .entries
        .iter()
        .map(|e| {
            let mel = load_mel(&base.join(&e.mel))?;
            let cond = CondFile::load(&base.join(&e.cond))?;
            check_hash(&hash, &cond.config_hash)?;
            if mel.n_frames() != cond.conditions.n_frames() || mel.n_mels() != cfg.n_mels {
                return Err(Error::Format(format!("{}: mel and conditions disagree", e.id)));
            }
            Ok(TrainItem { id: e.id.clone(), x0: model_cfg.normalize(&mel), conds: cond.conditions, labeling: e.labeling })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskCounts {
    pub full: usize,
    pub pitch_only: usize,
    pub text_only: usize,
    pub none: usize,
}

pub struct TrainOutcome {
    pub model: ScoreModel,
    pub losses: Vec<f64>,
    pub mask_counts: MaskCounts,
}

/// Trains from scratch for `cfg.steps` steps. `on_step(step, loss, model)`
/// runs after every update (1-based step).
pub fn train_model(
    cfg: &RunConfig,
    items: &[TrainItem],
    seed: u64,
    mut on_step: impl FnMut(usize, f64, &ScoreModel) -> Result<()>,
) -> Result<TrainOutcome> {
    if items.is_empty() {
        return Err(Error::Precondition("nothing to train on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ScoreModel::new(cfg.model_config(), rng.random(), MODEL_DTYPE)?;
    let mut trainer = Trainer::new(model, cfg.lr);
    let policy = MaskPolicy::from_config(cfg);
    let mut counts = MaskCounts::default();
    let labeled: Vec<usize> = (0..items.len()).filter(|&i| items[i].labeling != Labeling::None).collect();
    let unlabeled: Vec<usize> = (0..items.len()).filter(|&i| items[i].labeling == Labeling::None).collect();
    let batch_size = cfg.batch_size.min(items.len());
    // with a labeled share set and both pools present, each batch holds a
    // fixed number of labeled items
    let n_labeled_slots = if cfg.labeled_batch_fraction > 0.0 && !labeled.is_empty() && !unlabeled.is_empty() {
        Some(((batch_size as f64 * cfg.labeled_batch_fraction).round() as usize).clamp(1, batch_size))
    } else {
        None
    };
    let mut all = Cycler::new((0..items.len()).collect());
    let mut lab = Cycler::new(labeled);
    let mut unlab = Cycler::new(unlabeled);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut batch_items = Vec::with_capacity(batch_size);
        for slot in 0..batch_size {
            let index = match n_labeled_slots {
                Some(n) if slot < n => lab.next(&mut rng),
                Some(_) => unlab.next(&mut rng),
                None => all.next(&mut rng),
            };
            let item = &items[index];
            let t = item.conds.n_frames();
            let (start, len) = if cfg.train_frames > 0 && t > cfg.train_frames {
                (rng.random_range(0..=t - cfg.train_frames), cfg.train_frames)
            } else {
                (0, t)
            };
            let mut fc = item.conds.slice(start, len);
            match policy.choose(item.labeling, &mut rng) {
                Some(target) => {
                    fc = mask_conditions(&fc, target);
                    match target {
                        MaskTarget::PitchOnly => counts.pitch_only += 1,
                        MaskTarget::TextOnly => counts.text_only += 1,
                        MaskTarget::None => counts.none += 1,
                    }
                }
                None => counts.full += 1,
            }
            batch_items.push((item.x0.slice(s![.., start..start + len]).to_owned(), fc));
        }
        let batch = Batch::new(&batch_items)?;
        let loss = trainer.train_step(&batch, rng.random())?;
        losses.push(loss);
        on_step(step, loss, trainer.model())?;
    }
    Ok(TrainOutcome { model: trainer.into_model(), losses, mask_counts: counts })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub losses: Vec<f64>,
    pub mask_counts: MaskCounts,
}

/// Trains on a manifest, writing periodic checkpoints, `model.svck` and a
/// loss log to `out`.
pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path, seed: u64) -> Result<TrainSummary> {
    let items = load_items(cfg, manifest)?;
    create_dir(out)?;
    let hash = cfg.config_hash();
    let outcome = train_model(cfg, &items, seed, |step, loss, model| {
        if step % 50 == 0 || step == 1 {
            log::info!("step {step}: loss {loss:.5}");
        }
        if step % cfg.checkpoint_every == 0 {
            model.save_checkpoint(&out.join(format!("ckpt_{step:07}.svck")), &hash, step as u64)?;
        }
        Ok(())
    })?;
    let checkpoint = out.join("model.svck");
    outcome.model.save_checkpoint(&checkpoint, &hash, cfg.steps as u64)?;
    let mut log = format!("# config_hash={hash}\n# seed={seed}\nstep\tloss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        writeln!(log, "{}\t{l}", i + 1).unwrap();
    }
    write(&out.join("loss.tsv"), log)?;
    Ok(TrainSummary { checkpoint, losses: outcome.losses, mask_counts: outcome.mask_counts })
}

// ---------------------------------------------------------------- sample

/// Loads a checkpoint written under the same config hash.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(ScoreModel, u64)> {
    let ckpt = Checkpoint::load(path)?;
    check_hash(&cfg.config_hash(), &ckpt.config_hash)?;
    Ok((ScoreModel::from_checkpoint(&ckpt, MODEL_DTYPE)?, ckpt.step))
}

/// Samples a batch of equal-length conditions; returns denormalized mels.
pub fn sample_mels(
    model: &ScoreModel,
    conds: &[FrameConditions],
    guidance: &GuidanceConfig,
    sc: &SamplerConfig,
) -> Result<Vec<MelSpectrogram>> {
    let mc = model.config();
    let x = sample_with(conds, mc.n_mels, guidance, sc, &mc.schedule, model)?;
    Ok(x.axis_iter(Axis(0)).map(|v| mc.denormalize(v)).collect())
}

/// Run metadata stored next to each sampled mel.
pub fn sample_metadata(cfg: &RunConfig, sc: &SamplerConfig, label_name: &str, frames: usize, step: u64) -> String {
    let g = cfg.guidance();
    format!(
        "config_hash={}\ncheckpoint_step={step}\nlabel={label_name}\nframes={frames}\nseed={}\n\
         sampler={}\nn_steps={}\nt_min={}\ntime_grid=uniform_left_endpoint\nbeta_0={}\nbeta_1={}\n\
         guidance_mode={}\nw1={}\nw2={}\nnorm_based={}\neps_norm={}\nnorm_granularity=global_frobenius_per_item\n",
        cfg.config_hash(),
        sc.seed,
        sc.kind.as_str(),
        sc.n_steps,
        sc.t_min,
        cfg.beta_0,
        cfg.beta_1,
        g.mode.as_str(),
        g.w1,
        g.w2,
        g.norm_based,
        g.eps_norm,
    )
}

/// Samples one mel per label file into `out` as `<stem>.mel` + `<stem>.meta`.
pub fn cmd_sample(cfg: &RunConfig, checkpoint: &Path, labels: &[PathBuf], out: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    if labels.is_empty() {
        return Err(Error::Precondition("no label files given".into()));
    }
    let (model, step) = load_model(cfg, checkpoint)?;
    create_dir(out)?;
    let sc = SamplerConfig { seed, ..cfg.sampler_config() };
    let mut written = Vec::new();
    for path in labels {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let label = parse_label_file(&bytes)?;
        let frames = label_frames(&label, cfg)?;
        let fc = expand_labels(&label, frames, cfg.sample_rate, cfg.hop as u32)?;
        let mel = sample_mels(&model, std::slice::from_ref(&fc), &cfg.guidance(), &sc)?.remove(0);
        let name = stem(path);
        let mel_path = out.join(format!("{name}.mel"));
        save_mel(&mel_path, &mel)?;
        let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        write(&out.join(format!("{name}.meta")), sample_metadata(cfg, &sc, &file_name, frames, step))?;
        written.push(mel_path);
    }
    Ok(written)
}

// ---------------------------------------------------------------- eval

fn reference_mel(cfg: &RunConfig, dir: &Path, name: &str) -> Result<Option<MelSpectrogram>> {
    let mel = dir.join(format!("{name}.mel"));
    if mel.exists() {
        return load_mel(&mel).map(Some);
    }
    let wav = dir.join(format!("{name}.wav"));
    if wav.exists() {
        return mel_spectrogram_with(&Waveform::read_wav(&wav)?, &cfg.mel_params()).map(Some);
    }
    Ok(None)
}

fn crop_frames(mel: &MelSpectrogram, n: usize) -> MelSpectrogram {
    MelSpectrogram::new(mel.values.slice(s![.., ..n]).to_owned())
}

/// Loads a probe trained under the same config hash.
pub fn load_probe(cfg: &RunConfig, path: &Path) -> Result<Probe> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    check_hash(&cfg.config_hash(), &Checkpoint::decode(&bytes)?.config_hash)?;
    Probe::decode(&bytes)
}

/// Compares every generated mel in `gen` with its reference (`.mel` or
/// `.wav`) in `reference` over their common leading frames. F0 comes from
/// the mel-domain estimator on both sides. With a probe, fully labeled
/// `<stem>.lab` files in `reference` add label recovery. Writes `eval_report.txt` and `eval_summary.txt`.
pub fn cmd_eval(cfg: &RunConfig, reference: &Path, gen: &Path, out: &Path, probe: Option<&Path>) -> Result<EvalReport> {
    let probe = probe.map(|p| load_probe(cfg, p)).transpose()?;
    let mut names: Vec<String> = files_with_extension(gen, "mel")?.iter().map(|p| stem(p)).collect();
    let mut ref_names: Vec<String> = files_with_extension(reference, "mel")?
        .into_iter()
        .chain(files_with_extension(reference, "wav")?)
        .map(|p| stem(&p))
        .collect();
    ref_names.sort();
    ref_names.dedup();
    names.sort();
    let missing_ref: Vec<&String> = names.iter().filter(|n| !ref_names.contains(n)).collect();
    let missing_gen: Vec<&String> = ref_names.iter().filter(|n| !names.contains(n)).collect();
    if !missing_ref.is_empty() || !missing_gen.is_empty() || names.is_empty() {
        return Err(Error::Precondition(format!(
            "unpaired files; no reference for {missing_ref:?}, no generation for {missing_gen:?}"
        )));
    }
    let mut tracks = Vec::with_capacity(names.len());
    for name in &names {
        let r = reference_mel(cfg, reference, name)?.expect("paired above");
        let g = load_mel(&gen.join(format!("{name}.mel")))?;
        // generations stop at the last note end; references may run on
        let n = r.n_frames().min(g.n_frames());
        if r.n_frames() != g.n_frames() {
            log::warn!("{name}: comparing the first {n} frames ({} reference, {} generated)", r.n_frames(), g.n_frames());
        }
        let (r, g) = (crop_frames(&r, n), crop_frames(&g, n));
        let recovery = match &probe {
            Some(p) => {
                let lab = reference.join(format!("{name}.lab"));
                let label = parse_label_file(&std::fs::read(&lab).map_err(|e| Error::io(&lab, e))?)?;
                let fc = expand_labels(&label, g.n_frames(), cfg.sample_rate, cfg.hop as u32)?;
                Some(label_recovery(&g, &fc, p)?)
            }
            None => None,
        };
        tracks.push((name.clone(), mel_f0(&r), mel_f0(&g), recovery));
    }
    let segments: Vec<Segment> = tracks
        .iter()
        .map(|(n, r, g, rec)| Segment { name: n, reference: r, generated: g, label_recovery: *rec })
        .collect();
    let report = EvalReport::from_segments(&segments)?;
    create_dir(out)?;
    let hash = cfg.config_hash();
    write(&out.join("eval_report.txt"), format!("# config_hash={hash}\n{}", report.to_text()))?;
    write(&out.join("eval_summary.txt"), format!("config_hash={hash}\n{}", report.to_key_values()))?;
    Ok(report)
}

/// Trains the evaluation probe on the fully labeled items of a manifest.
/// Returns the probe path and its accuracy on the training items.
pub fn cmd_probe(cfg: &RunConfig, manifest: &Path, out: &Path, seed: u64) -> Result<(PathBuf, f64)> {
    let model_cfg = cfg.model_config();
    let data: Vec<(MelSpectrogram, FrameConditions)> = load_items(cfg, manifest)?
        .into_iter()
        .filter(|it| it.labeling == Labeling::Full)
        .map(|it| (model_cfg.denormalize(it.x0.view()), it.conds))
        .collect();
    if data.is_empty() {
        return Err(Error::Precondition("manifest has no fully labeled items".into()));
    }
    let mut probe = Probe::new(probe_config(cfg), seed)?;
    probe.train(&data, seed)?;
    let acc = data.iter().map(|(m, fc)| label_recovery(m, fc, &probe)).sum::<Result<f64>>()? / data.len() as f64;
    create_dir(out)?;
    let path = out.join("probe.svck");
    write(&path, probe.encode(&cfg.config_hash())?)?;
    Ok((path, acc))
}

pub fn probe_config(cfg: &RunConfig) -> ProbeConfig {
    ProbeConfig {
        n_mels: cfg.n_mels,
        hidden: cfg.probe_hidden,
        kernel: cfg.probe_kernel,
        steps: cfg.probe_steps,
        lr: cfg.probe_lr,
        batch_size: cfg.batch_size,
        mel_mean: cfg.mel_mean,
        mel_std: cfg.mel_std,
    }
}

// ---------------------------------------------------------------- oracle

/// Runs the guidance identities on the default mixture oracle and writes
/// `oracle_report.txt`.
pub fn cmd_oracle_check(cfg: &RunConfig, out: &Path, seed: u64) -> Result<ResidualReport> {
    let report = MixtureOracle::default_2x2().verify_guidance_identities(cfg.oracle_points, seed)?;
    create_dir(out)?;
    write(
        &out.join("oracle_report.txt"),
        format!("config_hash={}\nseed={seed}\n{}", cfg.config_hash(), report.to_key_values()),
    )?;
    Ok(report)
}
