//! The synthetic benchmark: 12 low-rank classes, four pretraining classes,
//! four tasks of two novel classes each with a 2:1 old-to-new mix. Writes the
//! usual run directory and prints the per-task table.
//!
//!     cargo run --release --example benchmark -- [STRATEGY] [SEED]

use cual::cli::{cmd_run, RunConfig};

const CONFIG: &str = include_str!("../configs/synthetic_benchmark.toml");

fn main() -> cual::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::from_toml(CONFIG)?;
    if let Some(strategy) = args.next() {
        cfg.strategy = strategy;
    }
    if let Some(seed) = args.next() {
        cfg.seed = seed
            .parse()
            .map_err(|_| cual::Error::Output(format!("seed {seed:?} is not an integer")))?;
    }
    cfg.out = cfg.out.join(format!("{}-{}", cfg.strategy, cfg.seed));

    let report = cmd_run(&cfg)?;
    println!("task  accuracy  labels  pseudo  recall  classes");
    for r in &report.rows {
        println!(
            "{:>4}  {:>8.4}  {:>3}/{:<3} {:>6}  {:>6.2}  {:>7}",
            r.task,
            r.cumulative_accuracy,
            r.labels_used,
            r.budget_total,
            r.pseudo_labels_used,
            r.discovery_recall,
            r.learned_classes
        );
    }
    let s = &report.summary;
    println!(
        "{} seed {}: pretrain {:.4}, averaged {:.4}, final {:.4}, recall {:.2}, {} oracle calls",
        s.strategy, s.seed, s.pretrain_accuracy, s.averaged_accuracy, s.final_accuracy, s.discovery_recall, s.oracle_calls
    );
    println!("outputs in {}", report.out.display());
    Ok(())
}
