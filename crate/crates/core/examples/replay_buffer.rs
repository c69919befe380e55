//! Class-balanced replay: a small buffer receives classes one task at a
//! time and evicts from the largest class so every class keeps a fair share.
//!
//!     cargo run --example replay_buffer

use cual::embedding::{generate_synthetic, SyntheticSpec};
use cual::replay::{Provenance, ReplayBuffer};

fn main() -> cual::Result<()> {
    let data = generate_synthetic(&SyntheticSpec::new(6, 8, 40, 3.0, 2))?;
    let by_class = data.indices_by_class();
    let mut buffer = ReplayBuffer::new(60, 8)?;

    for (task, pair) in by_class.values().collect::<Vec<_>>().chunks(2).enumerate() {
        let rows: Vec<usize> = pair.iter().flat_map(|r| r.iter().copied()).collect();
        let provenance = if task == 0 { Provenance::Active } else { Provenance::Pseudo };
        let report = buffer.insert_balanced(&data.subset(&rows), provenance)?;
        println!(
            "task {task}: inserted {}, evicted {}, per-class counts {:?}",
            report.inserted,
            report.evictions.len(),
            buffer.counts()
        );
    }

    let counts: Vec<usize> = buffer.counts().into_values().collect();
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    println!("{} entries, class sizes within [{lo}, {hi}]", buffer.len());
    assert!(hi - lo <= 1);
    Ok(())
}
