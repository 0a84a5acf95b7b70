//! `svs`: corpus preparation, training, sampling and evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use svs_core::config::RunConfig;
use svs_core::guidance::GuidanceMode;
use svs_core::pipeline;

#[derive(Parser)]
#[command(name = "svs", version, about = "Semi-supervised singing voice synthesis")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build features and a manifest from a corpus directory.
    Prepare {
        /// Directory of `.lab` files with optional `.mel`/`.wav`; falls back to `corpus_dir`.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train the score model on a manifest.
    Train {
        /// Falls back to `manifest` in the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Sample mel-spectrograms for label files.
    Sample {
        /// Falls back to `checkpoint` in the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        guidance: Option<GuidanceMode>,
        #[arg(long)]
        w1: Option<f64>,
        #[arg(long)]
        w2: Option<f64>,
        #[arg(long)]
        n_steps: Option<usize>,
        #[arg(required = true)]
        labels: Vec<PathBuf>,
    },
    /// Compare generated mels with references.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        /// Probe checkpoint for label recovery.
        #[arg(long)]
        probe: Option<PathBuf>,
        /// Fail (exit 2) above this F0 RMSE in octaves.
        #[arg(long)]
        max_f0_rmse: Option<f64>,
        /// Fail (exit 2) below this semitone accuracy.
        #[arg(long)]
        min_s_acc: Option<f64>,
    },
    /// Check the guidance identities on the analytic mixture oracle.
    OracleCheck,
    /// Write a synthetic labeled corpus.
    SynthCorpus,
    /// Train the label-recovery probe on the fully labeled items of a manifest.
    Probe {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

enum Outcome {
    Ok,
    ThresholdFailed,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match flag.or_else(|| fallback.clone()) {
        Some(p) => Ok(p),
        None => bail!("no {name} given (flag or config key `{name}`)"),
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = load_config(cli.common.config.as_deref())?;
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    let out = &cli.common.out;
    match cli.command {
        Command::Prepare { corpus } => {
            let corpus = required(corpus, &cfg.corpus_dir, "corpus_dir")?;
            let report = pipeline::cmd_prepare(&cfg, &corpus, out)?;
            for (id, why) in &report.failures {
                eprintln!("skipped {id}: {why}");
            }
            println!("{} items -> {}", report.n_items, report.manifest.display());
        }
        Command::Train { manifest } => {
            let manifest = required(manifest, &cfg.manifest, "manifest")?;
            let summary = pipeline::cmd_train(&cfg, &manifest, out, cfg.seed)?;
            println!(
                "final loss {:.5} -> {}",
                summary.losses.last().copied().unwrap_or(f64::NAN),
                summary.checkpoint.display()
            );
        }
        Command::Sample { checkpoint, guidance, w1, w2, n_steps, labels } => {
            let checkpoint = required(checkpoint, &cfg.checkpoint, "checkpoint")?;
            cfg.guidance_mode = guidance.unwrap_or(cfg.guidance_mode);
            cfg.w1 = w1.unwrap_or(cfg.w1);
            cfg.w2 = w2.unwrap_or(cfg.w2);
            cfg.n_steps = n_steps.unwrap_or(cfg.n_steps);
            cfg.validate()?;
            for path in pipeline::cmd_sample(&cfg, &checkpoint, &labels, out, cfg.seed)? {
                println!("{}", path.display());
            }
        }
        Command::Eval { reference, generated, probe, max_f0_rmse, min_s_acc } => {
            let report = pipeline::cmd_eval(&cfg, &reference, &generated, out, probe.as_deref())?;
            print!("{}", report.to_text());
            let mut failed = false;
            if let Some(max) = max_f0_rmse {
                if report.f0_rmse.is_none_or(|v| v > max) {
                    eprintln!("f0_rmse {:?} exceeds {max}", report.f0_rmse);
                    failed = true;
                }
            }
            if let Some(min) = min_s_acc {
                if report.s_acc.is_none_or(|v| v < min) {
                    eprintln!("s_acc {:?} below {min}", report.s_acc);
                    failed = true;
                }
            }
            if failed {
                return Ok(Outcome::ThresholdFailed);
            }
        }
        Command::OracleCheck => {
            let report = pipeline::cmd_oracle_check(&cfg, out, cfg.seed)?;
            print!("{}", report.to_key_values());
            if !report.passed() {
                return Ok(Outcome::ThresholdFailed);
            }
        }
        Command::SynthCorpus => {
            let n = pipeline::cmd_synth_corpus(&cfg, out, cfg.seed)?;
            println!("{n} items -> {}", out.display());
        }
        Command::Probe { manifest } => {
            let manifest = required(manifest, &cfg.manifest, "manifest")?;
            let (path, acc) = pipeline::cmd_probe(&cfg, &manifest, out, cfg.seed)
                .with_context(|| format!("training probe on {}", manifest.display()))?;
            println!("training recovery {acc:.3} -> {}", path.display());
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage errors are input errors; exit 2 is reserved for thresholds
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ThresholdFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
