//! One task of the discovery loop: pretrain on two classes, then hand the
//! agent an unlabeled pool mixing them with two unseen classes and a small
//! labeling budget. Prints the per-iteration trace.
//!
//!     cargo run --release --example single_task

use cual::benchmark::{cumulative_accuracy, SimulatedOracle};
use cual::embedding::{generate_synthetic, ClassShape, SyntheticSpec};
use cual::inner_loop::{run_task, Agent, LabelOracle, LoopConfig};
use cual::ClassId;

fn main() -> cual::Result<()> {
    let spec = SyntheticSpec::new(4, 32, 300, 8.0, 5).with_shape(ClassShape::LowRank {
        rank: 8,
        residual_std: 0.03,
    });
    let data = generate_synthetic(&spec)?;
    let (mut pre, mut pool, mut eval) = (vec![], vec![], vec![]);
    for (class, rows) in data.indices_by_class() {
        eval.extend_from_slice(&rows[..60]);
        if class.0 < 2 {
            pre.extend_from_slice(&rows[60..180]);
            pool.extend_from_slice(&rows[180..]);
        } else {
            pool.extend_from_slice(&rows[60..]);
        }
    }
    let (pretrain, pool, eval) = (data.subset(&pre), data.subset(&pool), data.subset(&eval));

    let cfg = LoopConfig {
        budget_fraction: 0.02,
        ..LoopConfig::default()
    };
    let mut agent = Agent::pretrain(&pretrain, 1024, 2500, &cfg)?;
    let known: Vec<ClassId> = agent.learned_classes().to_vec();
    println!("pretrained on {known:?}, pool of {} samples", pool.len());

    let mut oracle = SimulatedOracle::new();
    oracle.set_pool(&pool)?;
    let outcome = run_task(&mut agent, 1, &pool, &mut oracle, &cfg)?;
    for it in &outcome.trace {
        println!(
            "iteration {}: threshold {:.4}, {} above, queried {}, pseudo-labeled {}, discovered {:?}, stop {:?}",
            it.iteration,
            it.threshold,
            it.above_threshold,
            it.queried.len(),
            it.pseudo_labeled.len(),
            it.discovered,
            it.stop
        );
    }
    println!(
        "spent {}/{} labels ({} oracle calls), discovered {:?}",
        outcome.labels_spent,
        outcome.budget_total,
        oracle.calls(),
        outcome.discovered
    );
    let all: Vec<ClassId> = (0..4).map(ClassId).collect();
    println!("accuracy over all four classes: {:.4}", cumulative_accuracy(&agent.long_head, &eval, &all)?);
    Ok(())
}
