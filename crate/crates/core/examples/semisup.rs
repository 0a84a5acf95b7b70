//! Runs semi-supervised versus supervised replicates and prints metrics.
//!
//! `cargo run --release --example semisup -- <config.toml> <n_eval> <seed>...`

use std::time::Instant;

use svs_core::config::RunConfig;
use svs_core::study::{run_replicate, train_probe};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::load(args.first().ok_or("missing config")?.as_ref())?;
    cfg.validate()?;
    let n_eval: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(16);
    let seeds: Vec<u64> = args.iter().skip(2).map(|s| s.parse()).collect::<Result<_, _>>()?;
    let t0 = Instant::now();
    let probe = train_probe(&cfg, 200, 9_999)?;
    println!("probe trained in {:.1}s", t0.elapsed().as_secs_f64());
    for seed in seeds {
        let t = Instant::now();
        let r = run_replicate(&cfg, n_eval, seed, &probe)?;
        println!(
            "seed {seed} ({:.0}s) loss semi {:.4} sup {:.4}",
            t.elapsed().as_secs_f64(),
            r.semi_final_loss,
            r.supervised_final_loss
        );
        for (name, m) in [("dual", r.dual), ("single", r.single), ("none", r.none), ("supervised", r.supervised)] {
            println!("  {name:<10} s_acc {:.4} recovery {:.4}", m.s_acc, m.label_recovery);
        }
    }
    Ok(())
}
