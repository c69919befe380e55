//! Compares every strategy on one shared stream, then sweeps the labeling
//! budget for the full method. Each arm gets its own run directory and the
//! rows are collected in sweep.csv.
//!
//!     cargo run --release --example ablation_sweep

use cual::benchmark::Strategy;
use cual::cli::{cmd_sweep, RunConfig, SweepAxis};

const CONFIG: &str = include_str!("../configs/synthetic_benchmark.toml");

fn main() -> cual::Result<()> {
    let mut cfg = RunConfig::from_toml(CONFIG)?;
    let root = cfg.out.join("ablation");

    cfg.out = root.join("strategies");
    let names = Strategy::ALL.iter().map(|s| s.name().to_string()).collect();
    let report = cmd_sweep(&cfg, &SweepAxis::Strategy(names))?;
    println!("{:<16} {:>9} {:>7} {:>7}", "strategy", "averaged", "final", "labels");
    for (label, r) in &report.arms {
        let s = &r.summary;
        println!("{label:<16} {:>9.4} {:>7.4} {:>7}", s.averaged_accuracy, s.final_accuracy, s.oracle_calls);
    }

    cfg.out = root.join("budgets");
    cfg.strategy = Strategy::Cual.name().into();
    let report = cmd_sweep(&cfg, &SweepAxis::Budget(vec![0.005, 0.01, 0.02, 0.04]))?;
    println!("\n{:<8} {:>9} {:>7}", "budget", "averaged", "labels");
    for (label, r) in &report.arms {
        println!("{label:<8} {:>9.4} {:>7}", r.summary.averaged_accuracy, r.summary.oracle_calls);
    }
    for (label, e) in report.failures {
        eprintln!("arm {label} failed: {e}");
    }
    println!("\nsweep tables under {}", root.display());
    Ok(())
}
