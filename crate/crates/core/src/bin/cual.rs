use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cual::cli::{cmd_gen_synthetic, cmd_inspect, cmd_run, cmd_sweep, parse_config, parse_synthetic, Overrides, SweepAxis};
use cual::embedding::{ClassShape, SyntheticSpec};

#[derive(Parser)]
#[command(name = "cual", version, about = "Continual active learning on embedding streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// K,D,N,SEP
    #[arg(long)]
    synthetic: Option<String>,
}

impl RunFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            strategy: self.strategy.clone(),
            budget: self.budget,
            out: self.out.clone(),
            synthetic: self.synthetic.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(RunFlags),
    /// One run per strategy or budget value on a shared stream.
    Sweep {
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long, value_delimiter = ',', conflicts_with = "budgets")]
        strategies: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<f64>>,
    },
    /// Write a synthetic labeled dataset as CEMB.
    GenSynthetic {
        /// K,D,N,SEP
        #[arg(long)]
        synthetic: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Rank of each class; 0 for isotropic classes.
        #[arg(long, default_value_t = 0)]
        rank: usize,
        #[arg(long, default_value_t = 0.0)]
        residual_std: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a CEMB header.
    Inspect { path: PathBuf },
}

fn run(cli: Cli) -> cual::Result<()> {
    match cli.command {
        Command::Run(flags) => {
            let cfg = parse_config(flags.config.as_deref(), &flags.overrides())?;
            let report = cmd_run(&cfg)?;
            println!(
                "{} seed {}: averaged accuracy {:.4}, final {:.4} -> {}",
                report.summary.strategy,
                report.summary.seed,
                report.summary.averaged_accuracy,
                report.summary.final_accuracy,
                report.out.display()
            );
        }
        Command::Sweep {
            flags,
            strategies,
            budgets,
        } => {
            let cfg = parse_config(flags.config.as_deref(), &flags.overrides())?;
            let axis = match (strategies, budgets) {
                (Some(s), _) => SweepAxis::Strategy(s),
                (None, Some(b)) => SweepAxis::Budget(b),
                (None, None) => SweepAxis::Strategy(Vec::new()),
            };
            let report = cmd_sweep(&cfg, &axis)?;
            for (label, r) in &report.arms {
                println!("{label}: averaged accuracy {:.4}", r.summary.averaged_accuracy);
            }
            if let Some((label, err)) = report.failures.first() {
                for (l, e) in &report.failures {
                    eprintln!("arm {l} failed: {e}");
                }
                return Err(cual::Error::Output(format!(
                    "{} of {} arms failed, first {label}: {err}",
                    report.failures.len(),
                    report.failures.len() + report.arms.len()
                )));
            }
        }
        Command::GenSynthetic {
            synthetic,
            seed,
            rank,
            residual_std,
            out,
        } => {
            let (k, d, n, sep) = parse_synthetic(&synthetic)?;
            let mut spec = SyntheticSpec::new(k, d, n, sep, seed);
            if rank > 0 {
                spec = spec.with_shape(ClassShape::LowRank { rank, residual_std });
            }
            let set = cmd_gen_synthetic(&spec, &out)?;
            println!("wrote {} samples of dimension {} to {}", set.len(), set.dim(), out.display());
        }
        Command::Inspect { path } => println!("{}", cmd_inspect(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("CUAL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // fails only if the pool was already built, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.to_string() });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
