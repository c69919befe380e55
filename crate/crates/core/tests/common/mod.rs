#![allow(dead_code)]

use std::path::Path;

use cual::cli::RunConfig;
use cual::embedding::{generate_synthetic, ClassShape, EmbeddingSet, SyntheticSpec};

/// Eight low-rank classes in 16 dimensions; two tasks after four pretraining
/// classes. Small enough to run in a couple of seconds.
pub fn small_config(out: &Path) -> RunConfig {
    RunConfig::from_toml(
        r#"
        synthetic = "8,16,120,8"
        synthetic_rank = 4
        synthetic_residual_std = 0.03
        pretrain_classes = [0, 1, 2, 3]
        num_tasks = 2
        holdout_fraction = 0.5
        budget_fraction = 0.05
        hidden = 64
        long_epochs = 10
        "#,
    )
    .map(|mut c| {
        c.out = out.to_path_buf();
        c
    })
    .unwrap()
}

pub fn low_rank(classes: usize, dim: usize, per_class: usize, seed: u64) -> EmbeddingSet {
    let spec = SyntheticSpec::new(classes, dim, per_class, 8.0, seed).with_shape(ClassShape::LowRank {
        rank: 4,
        residual_std: 0.03,
    });
    generate_synthetic(&spec).unwrap()
}
