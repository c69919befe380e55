//! Fits one PCA subspace per known class and shows that the minimum
//! reconstruction error separates samples of unseen classes from known ones.
//!
//!     cargo run --example fre_novelty

use cual::embedding::{generate_synthetic, ClassShape, SyntheticSpec};
use cual::scoring::{compute_threshold, score_initial};
use cual::subspace::{fit_rows, SubspaceRegistry, DEFAULT_VARIANCE_RETAINED};
use cual::ClassId;

fn main() -> cual::Result<()> {
    let spec = SyntheticSpec::new(6, 32, 200, 8.0, 1).with_shape(ClassShape::LowRank {
        rank: 8,
        residual_std: 0.03,
    });
    let data = generate_synthetic(&spec)?;
    let by_class = data.indices_by_class();

    // classes 0..3 are known: fit on 150 samples each, keep 50 for calibration
    let mut registry = SubspaceRegistry::new();
    let mut calibration = Vec::new();
    let mut probe = Vec::new();
    for (class, rows) in &by_class {
        if class.0 < 3 {
            let sub = fit_rows(&data, &rows[..150], *class, DEFAULT_VARIANCE_RETAINED)?;
            println!("class {class}: {} components from {} samples", sub.rank(), sub.n_fit);
            registry.insert_old(sub)?;
            calibration.extend_from_slice(&rows[150..]);
        } else {
            probe.extend_from_slice(&rows[..50]);
        }
    }

    let calib_scores: Vec<f64> = score_initial(&registry, &data.subset(&calibration))?
        .iter()
        .map(|r| r.score)
        .collect();
    let t = compute_threshold(&calib_scores, 2.0)?;
    println!(
        "threshold {:.4} (mean {:.4} + 2 x std {:.4})",
        t.value, t.source_mean, t.source_std
    );

    let probe_set = data.subset(&probe);
    let novel = score_initial(&registry, &probe_set)?;
    let flagged = novel.iter().filter(|r| r.score > t.value).count();
    let false_alarms = calib_scores.iter().filter(|s| **s > t.value).count();
    println!(
        "unseen classes: {flagged}/{} above threshold; known classes: {false_alarms}/{} above",
        novel.len(),
        calib_scores.len()
    );
    let mean_novel = novel.iter().map(|r| r.score).sum::<f64>() / novel.len() as f64;
    println!("mean score of unseen samples {mean_novel:.3}");
    assert!(registry.old().contains_key(&ClassId(0)));
    Ok(())
}
