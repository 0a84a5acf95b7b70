//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,4` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use svs_core::audiofeat::F0Track;
use svs_core::config::RunConfig;
use svs_core::diffusion::{forward_sample, sample_with, NoiseSchedule, SamplerConfig, SamplerKind};
use svs_core::evalkit::{f0_rmse, semitone_accuracy};
use svs_core::guidance::{guided_score, GuidanceConfig, GuidanceMode, ScoreTriple};
use svs_core::labelkit::{allocate_frames, decompose_hangul, note_to_frames, Labeling};
use svs_core::model::{finite_difference_check, Batch, LossNoise, ScoreModel};
use svs_core::oracle::{MixtureOracle, OracleCondition, OracleScorer};
use svs_core::pipeline::{
    cmd_eval, cmd_oracle_check, cmd_prepare, cmd_probe, cmd_sample, cmd_synth_corpus, cmd_train, train_model,
    TrainItem,
};
use svs_core::study::{run_replicate, sign_test_p, train_probe, Replicate};
use svs_core::synth::{random_label, render_mel};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn config(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    cfg.validate().expect("valid config");
    cfg
}

fn ordered(x: f64) -> i64 {
    let b = x.to_bits() as i64;
    if b < 0 {
        i64::MIN - b
    } else {
        b
    }
}

fn ulps(a: f64, b: f64) -> u64 {
    ordered(a).abs_diff(ordered(b))
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

fn guidance_algebra() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut max_ulps = 0u64;
    let mut telescoping = 0.0f64;
    for _ in 0..1000 {
        let (rows, cols) = (rng.random_range(1..=80), rng.random_range(1..=16));
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let full = gaussian(rows, cols, scale, &mut rng);
        let pitch_only = gaussian(rows, cols, scale, &mut rng);
        let uncond = gaussian(rows, cols, scale, &mut rng);
        let w = rng.random_range(0.0..2.0);
        let tele = (&full - &pitch_only) + (&pitch_only - &uncond) - (&full - &uncond);
        telescoping = tele.iter().fold(telescoping, |a, v| a.max(v.abs()));
        let triple = ScoreTriple { full, pitch_only: Some(pitch_only), uncond: Some(uncond), text_only: None };
        let plain = |mode, w2| GuidanceConfig { mode, w1: w, w2, norm_based: false, eps_norm: 1e-8 };
        let dual = guided_score(&triple, &plain(GuidanceMode::DualPitchAnchored, w))?;
        let single = guided_score(&triple, &plain(GuidanceMode::Single, 0.0))?;
        max_ulps = dual.iter().zip(&single).fold(max_ulps, |a, (p, q)| a.max(ulps(*p, *q)));
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        max_ulps <= 4 && telescoping <= 1e-12 && secs < 1.0,
        format!("max ulp {max_ulps}, telescoping {telescoping:.1e}, {secs:.2}s"),
    ))
}

fn bayes_identity() -> Outcome {
    let t0 = Instant::now();
    let oracle = MixtureOracle::default_2x2();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = rng.random_range(0.01..1.0);
        let x = Array1::from_shape_simple_fn(oracle.dim, || 3.0 * rng.sample::<f64, _>(StandardNormal));
        let (pitch, text) = (rng.random_range(0..2), rng.random_range(0..2));
        let analytic = oracle.score(x.view(), t, OracleCondition::Full { pitch, text })?
            - oracle.score(x.view(), t, OracleCondition::None)?;
        let mut fd = Array1::zeros(oracle.dim);
        for i in 0..oracle.dim {
            let mut up = x.clone();
            up[i] += h;
            let mut down = x.clone();
            down[i] -= h;
            fd[i] = (oracle.log_posterior(up.view(), t, pitch, text)? - oracle.log_posterior(down.view(), t, pitch, text)?)
                / (2.0 * h);
        }
        let err = (&analytic - &fd).mapv(|v| v * v).sum().sqrt();
        let scale = analytic.mapv(|v| v * v).sum().sqrt().max(1.0);
        worst = worst.max(err / scale);
    }
    let identities = oracle.verify_guidance_identities(100, 3)?;
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-6 && identities.passed() && secs < 10.0,
        format!("max rel err {worst:.1e}, identity residuals pass={}, {secs:.2}s", identities.passed()),
    ))
}

/// Energy distance between two samples from a precomputed distance matrix;
/// `a` lists the indices of the first sample.
fn energy_distance(dist: &Array2<f64>, a: &[usize], b: &[usize]) -> f64 {
    let mean = |p: &[usize], q: &[usize]| {
        p.iter().map(|&i| q.iter().map(|&j| dist[[i, j]]).sum::<f64>()).sum::<f64>() / (p.len() * q.len()) as f64
    };
    2.0 * mean(a, b) - mean(a, a) - mean(b, b)
}

fn energy_test(x: &Array2<f64>, y: &Array2<f64>, permutations: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let pooled = ndarray::concatenate(Axis(0), &[x.view(), y.view()]).expect("same width");
    let n = pooled.nrows();
    let dist = Array2::from_shape_fn((n, n), |(i, j)| {
        (&pooled.row(i) - &pooled.row(j)).mapv(|v| v * v).sum().sqrt()
    });
    let mut idx: Vec<usize> = (0..n).collect();
    let observed = energy_distance(&dist, &idx[..x.nrows()], &idx[x.nrows()..]);
    let mut exceed = 0;
    for _ in 0..permutations {
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), rng);
        if energy_distance(&dist, &idx[..x.nrows()], &idx[x.nrows()..]) >= observed {
            exceed += 1;
        }
    }
    (observed, (1 + exceed) as f64 / (1 + permutations) as f64)
}

fn sampler_correctness() -> Outcome {
    let t0 = Instant::now();
    let oracle = MixtureOracle::default_2x2();
    let scorer = OracleScorer { oracle: &oracle };
    let (pitch, text) = (1, 1);
    let n = 10_000;
    let conds = vec![OracleScorer::conditions(OracleCondition::Full { pitch, text }); n];
    let run = |kind, seed| -> Result<Array2<f64>, svs_core::Error> {
        let sc = SamplerConfig { n_steps: 200, kind, seed, ..Default::default() };
        let x = sample_with(&conds, oracle.dim, &GuidanceConfig::unguided(), &sc, &oracle.schedule, &scorer)?;
        Ok(x.index_axis(Axis(2), 0).to_owned())
    };
    let sde = run(SamplerKind::Sde, 31)?;
    let ode = run(SamplerKind::Ode, 32)?;

    let t_min = SamplerConfig::default().t_min;
    let target_mean = oracle.component_mean(pitch, text, t_min)?;
    let target_var = oracle.diffused_component_stats(t_min)?.var;
    let mean = sde.mean_axis(Axis(0)).expect("non-empty");
    let centered = &sde - &mean;
    let mut worst_z = 0.0f64;
    for i in 0..oracle.dim {
        let se = (centered.column(i).mapv(|v| v * v).sum() / (n - 1) as f64 / n as f64).sqrt();
        worst_z = worst_z.max((mean[i] - target_mean[i]).abs() / se);
        for j in i..oracle.dim {
            let prod = &centered.column(i) * &centered.column(j);
            let cov = prod.sum() / (n - 1) as f64;
            let se = (prod.mapv(|v| (v - cov).powi(2)).sum() / (n - 1) as f64 / n as f64).sqrt();
            let target = if i == j { target_var } else { 0.0 };
            worst_z = worst_z.max((cov - target).abs() / se);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let m = 1000;
    let pick = |a: &Array2<f64>, rng: &mut ChaCha8Rng| {
        let rows = rand::seq::index::sample(rng, n, m).into_vec();
        a.select(Axis(0), &rows)
    };
    let (a, b) = (pick(&sde, &mut rng), pick(&ode, &mut rng));
    let (energy, p) = energy_test(&a, &b, 200, &mut rng);
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        worst_z <= 3.0 && p > 0.01 && secs < 120.0,
        format!("max |z| {worst_z:.2} over mean and covariance, SDE vs ODE energy {energy:.2e} p = {p:.3}, {secs:.1}s"),
    ))
}

fn forward_closed_form() -> Outcome {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    let x0_value = 1.5;
    let x0 = Array1::from_elem(n, x0_value);
    let mut worst_z = 0.0f64;
    let mut worst_identity = 0.0f64;
    for t in [0.25, 0.5, 0.9] {
        let stats = sched.noise_stats(t)?;
        worst_identity = worst_identity.max((stats.mean_coef.powi(2) + stats.var - 1.0).abs());
        let (xt, _) = forward_sample(&x0, t, &sched, &mut rng)?;
        let mean = xt.mean().expect("non-empty");
        let var = xt.mapv(|v| (v - mean).powi(2)).sum() / (n - 1) as f64;
        let z_mean = (mean - stats.mean_coef * x0_value).abs() / (stats.var / n as f64).sqrt();
        let z_var = (var - stats.var).abs() / (stats.var * (2.0 / (n - 1) as f64).sqrt());
        worst_z = worst_z.max(z_mean).max(z_var);
    }
    Ok((
        worst_z <= 3.0 && worst_identity <= 1e-12,
        format!("max |z| {worst_z:.2}, max |mean_coef² + var − 1| {worst_identity:.1e}"),
    ))
}

fn training_correctness() -> Outcome {
    let t0 = Instant::now();
    let cfg = config("semisup.toml");
    let mc = cfg.model_config();

    let model = ScoreModel::new(mc.clone(), 5, DType::F64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let synth = cfg.synth_config();
    let items: Vec<_> = (0..2)
        .map(|i| {
            let label = random_label(&synth, 0, &mut rng);
            let mel = render_mel(&label, cfg.synth_frames, &synth, i)?;
            let fc = svs_core::labelkit::expand_labels(&label, cfg.synth_frames, cfg.sample_rate, cfg.hop as u32)?;
            Ok((mc.normalize(&mel), fc))
        })
        .collect::<svs_core::Result<_>>()?;
    let batch = Batch::new(&items)?;
    let noise = LossNoise::draw(&batch, &mut rng, false);
    // ID tables only see gradient on rows present in the batch
    let names: Vec<String> = model
        .params()
        .vars()
        .map(|(n, _)| n.to_string())
        .filter(|n| !n.ends_with("embedding.weight"))
        .collect();
    let entries: Vec<(String, usize)> = (0..10)
        .map(|_| {
            let name = names[rng.random_range(0..names.len())].clone();
            let size = model.params().get(&name).expect("listed").elem_count();
            (name, rng.random_range(0..size))
        })
        .collect();
    let checks = finite_difference_check(&model, &batch, &noise, &entries, 1e-3)?;
    let worst_grad = checks.iter().map(|c| c.rel_error()).fold(0.0, f64::max);

    // one fixed score rendered with independent jitter: a single component
    let label = random_label(&synth, 0, &mut ChaCha8Rng::seed_from_u64(6));
    let frames = cfg.synth_frames;
    let fc = svs_core::labelkit::expand_labels(&label, frames, cfg.sample_rate, cfg.hop as u32)?;
    let corpus: Vec<TrainItem> = (0..16)
        .map(|i| {
            Ok(TrainItem {
                id: format!("one{i}"),
                x0: mc.normalize(&render_mel(&label, frames, &synth, 100 + i)?),
                conds: fc.clone(),
                labeling: Labeling::Full,
            })
        })
        .collect::<svs_core::Result<_>>()?;
    let run_cfg = RunConfig { steps: 2000, p_text_mask: 0.0, p_both_mask: 0.0, p_pitch_mask: 0.0, ..cfg };
    let outcome = train_model(&run_cfg, &corpus, 7, |_, _, _| Ok(()))?;
    let window = 50;
    let first = outcome.losses[..window].iter().sum::<f64>() / window as f64;
    let last = outcome.losses[outcome.losses.len() - window..].iter().sum::<f64>() / window as f64;
    let decrease = 1.0 - last / first;
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        worst_grad <= 1e-4 && decrease >= 0.5 && secs < 600.0,
        format!(
            "max gradient rel err {worst_grad:.1e}, loss {first:.4} -> {last:.4} ({:.0}% decrease), {secs:.0}s",
            100.0 * decrease
        ),
    ))
}

fn semi_supervision() -> Outcome {
    let t0 = Instant::now();
    let cfg = config("semisup.toml");
    let seeds = [1u64, 2, 3, 4, 5];
    let probe = train_probe(&cfg, 200, 9_999)?;
    let mut reps: Vec<Replicate> = Vec::new();
    for &seed in &seeds {
        let r = run_replicate(&cfg, 16, seed, &probe)?;
        println!(
            "    seed {seed}: s_acc dual {:.3} single {:.3} none {:.3} supervised {:.3} | recovery dual {:.3} single {:.3} none {:.3} supervised {:.3}",
            r.dual.s_acc, r.single.s_acc, r.none.s_acc, r.supervised.s_acc,
            r.dual.label_recovery, r.single.label_recovery, r.none.label_recovery, r.supervised.label_recovery
        );
        reps.push(r);
    }
    let comparisons: [(&str, fn(&Replicate) -> (f64, f64, f64, f64)); 4] = [
        ("dual>none", |r| (r.dual.s_acc, r.none.s_acc, r.dual.label_recovery, r.none.label_recovery)),
        ("dual>supervised", |r| {
            (r.dual.s_acc, r.supervised.s_acc, r.dual.label_recovery, r.supervised.label_recovery)
        }),
        ("dual>single", |r| (r.dual.s_acc, r.single.s_acc, r.dual.label_recovery, r.single.label_recovery)),
        ("single>none", |r| (r.single.s_acc, r.none.s_acc, r.single.label_recovery, r.none.label_recovery)),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, f) in comparisons {
        let (mut s_wins, mut r_wins) = (0, 0);
        for r in &reps {
            let (a, b, c, d) = f(r);
            s_wins += usize::from(a > b);
            r_wins += usize::from(c > d);
        }
        let (ps, pr) = (sign_test_p(s_wins, reps.len()), sign_test_p(r_wins, reps.len()));
        ok &= ps <= 0.05 && pr <= 0.05;
        parts.push(format!("{name} s_acc {s_wins}/{} p={ps:.3} recovery {r_wins}/{} p={pr:.3}", reps.len(), reps.len()));
    }
    let secs = t0.elapsed().as_secs_f64();
    ok &= secs < 3600.0;
    Ok((ok, format!("{}; {secs:.0}s", parts.join("; "))))
}

fn alignment_properties() -> Outcome {
    let t0 = Instant::now();
    let mut conserved = true;
    for n in 1..200 {
        for coda in [false, true] {
            let a = allocate_frames(n, coda)?;
            conserved &= a.total() == n && a.nucleus >= 1 && (coda || a.coda == 0);
        }
    }
    let mut round_trip = 0;
    for cp in 0xAC00u32..=0xD7A3 {
        let c = char::from_u32(cp).expect("hangul block");
        round_trip += usize::from(decompose_hangul(c)?.compose() == c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut agree = 0;
    for _ in 0..1000 {
        let sr = [16_000u32, 22_050, 24_000, 44_100][rng.random_range(0..4)];
        let hop = [128u32, 256, 300, 512][rng.random_range(0..4)];
        let start = rng.random_range(0.0..30.0);
        let end = start + rng.random_range(0.01..3.0);
        let frame = |sec: f64| ((sec * sr as f64).floor() as u64 / hop as u64) as usize;
        agree += usize::from(note_to_frames(start, end, sr, hop)? == (frame(start), frame(end)));
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        conserved && round_trip == 11_172 && agree == 1000 && secs < 5.0,
        format!("allocation conserved {conserved}, hangul round trips {round_trip}/11172, note frames {agree}/1000, {secs:.2}s"),
    ))
}

fn metric_sanity() -> Outcome {
    let track = |hz: f64| F0Track::new(vec![hz; 50]);
    let reference = track(220.0);
    let cents = |c: f64| track(220.0 * 2f64.powf(c / 1200.0));
    let rmse = f0_rmse(&reference, &cents(100.0))?.unwrap_or(f64::NAN);
    let acc40 = semitone_accuracy(&reference, &cents(40.0))?.unwrap_or(f64::NAN);
    let acc100 = semitone_accuracy(&reference, &cents(100.0))?.unwrap_or(f64::NAN);
    Ok((
        (rmse - 1.0 / 12.0).abs() <= 1e-6 && acc40 == 1.0 && acc100 == 0.0,
        format!("semitone f0_rmse {rmse:.9}, s_acc at 40 cents {acc40}, at 100 cents {acc100}"),
    ))
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, std::fs::read(&path).expect("readable"));
            }
        }
    }
    out
}

fn pipeline_run(cfg: &RunConfig, root: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let corpus = root.join("corpus");
    cmd_synth_corpus(cfg, &corpus, 11)?;
    let prep = cmd_prepare(cfg, &corpus, &root.join("prep"))?;
    let run = cmd_train(cfg, &prep.manifest, &root.join("run"), 12)?;
    let labels = vec![corpus.join("item0000.lab"), corpus.join("item0001.lab")];
    cmd_sample(cfg, &run.checkpoint, &labels, &root.join("gen"), 13)?;
    let refs = root.join("ref");
    std::fs::create_dir_all(&refs)?;
    for name in ["item0000", "item0001"] {
        for ext in ["mel", "lab"] {
            std::fs::copy(corpus.join(format!("{name}.{ext}")), refs.join(format!("{name}.{ext}")))?;
        }
    }
    let (probe, _) = cmd_probe(cfg, &prep.manifest, &root.join("probe"), 14)?;
    cmd_eval(cfg, &refs, &root.join("gen"), &root.join("eval"), Some(&probe))?;
    cmd_oracle_check(cfg, &root.join("oracle"), 15)?;
    Ok(())
}

fn reproducibility() -> Outcome {
    let cfg = config("tiny.toml");
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    pipeline_run(&cfg, a.path())?;
    pipeline_run(&cfg, b.path())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let differing: Vec<String> = ta
        .keys()
        .chain(tb.keys())
        .filter(|k| ta.get(*k) != tb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let n_mel = ta.keys().filter(|k| k.extension().is_some_and(|e| e == "mel")).count();
    Ok((
        differing.is_empty() && n_mel > 0,
        format!("{} files ({n_mel} mel) compared, differing: {:?}", ta.len(), differing),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("guidance algebra", guidance_algebra),
        ("bayes identity", bayes_identity),
        ("sampler correctness", sampler_correctness),
        ("forward closed form", forward_closed_form),
        ("training correctness", training_correctness),
        ("semi-supervision benefit", semi_supervision),
        ("alignment properties", alignment_properties),
        ("metric sanity", metric_sanity),
        ("reproducibility", reproducibility),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let k = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&k)) {
            continue;
        }
        let (ok, detail) = match std::panic::catch_unwind(f) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        failed += usize::from(!ok);
        println!("criterion {k} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
