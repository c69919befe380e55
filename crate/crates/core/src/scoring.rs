//! Novelty scores and the quantities derived from them.
//!
//! At the first iteration of a task a sample's score is its smallest FRE over
//! the frozen old-class subspaces. Afterwards the score divides that value by
//! the FRE of the novel class the short-term head predicts, so samples far
//! from every old class and close to a novel one score highest.

use nalgebra::DMatrix;

use crate::embedding::EmbeddingSet;
use crate::heads::{predict_rows, Head};
use crate::subspace::{fre_batch, fre_rows, ClassSubspace, SubspaceRegistry};
use crate::{ClassId, Error, Result, SampleId};

pub const DEFAULT_EPS_DEN: f64 = 1e-8;
pub const DEFAULT_EPS_AMB: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: SampleId,
    /// Smallest old-class FRE.
    pub numerator: f64,
    /// FRE under the predicted novel class (absent at iteration 0).
    pub denominator: Option<f64>,
    pub score: f64,
    pub predicted_novel_class: Option<ClassId>,
    pub iteration: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    pub value: f64,
    pub k_std: f64,
    pub source_mean: f64,
    pub source_std: f64,
}

/// Per-sample minimum FRE over the old-class subspaces. Ties go to the lowest
/// class id.
pub fn old_class_numerators(registry: &SubspaceRegistry, set: &EmbeddingSet) -> Result<Vec<f64>> {
    if registry.old().is_empty() {
        return Err(Error::EmptyRegistry);
    }
    min_over_old(registry, |s| fre_batch(s, set), set.len())
}

/// [`old_class_numerators`] for f64 rows.
pub fn old_class_numerators_rows(registry: &SubspaceRegistry, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if registry.old().is_empty() {
        return Err(Error::EmptyRegistry);
    }
    min_over_old(registry, |s| fre_rows(s, x), x.nrows())
}

fn min_over_old<F>(registry: &SubspaceRegistry, fre: F, n: usize) -> Result<Vec<f64>>
where
    F: Fn(&ClassSubspace) -> Result<Vec<f64>>,
{
    let mut best = vec![f64::INFINITY; n];
    for subspace in registry.old().values() {
        for (b, f) in best.iter_mut().zip(fre(subspace)?) {
            if f < *b {
                *b = f;
            }
        }
    }
    Ok(best)
}

fn initial_records(ids: &[SampleId], numerators: Vec<f64>) -> Vec<ScoreRecord> {
    ids.iter()
        .zip(numerators)
        .map(|(id, num)| ScoreRecord {
            sample_id: *id,
            numerator: num,
            denominator: None,
            score: num,
            predicted_novel_class: None,
            iteration: 0,
        })
        .collect()
}

pub fn score_initial(registry: &SubspaceRegistry, set: &EmbeddingSet) -> Result<Vec<ScoreRecord>> {
    Ok(initial_records(set.ids(), old_class_numerators(registry, set)?))
}

/// [`score_initial`] for f64 rows with their ids.
pub fn score_initial_rows(registry: &SubspaceRegistry, ids: &[SampleId], x: &DMatrix<f64>) -> Result<Vec<ScoreRecord>> {
    check_ids(ids, x)?;
    Ok(initial_records(ids, old_class_numerators_rows(registry, x)?))
}

fn check_ids(ids: &[SampleId], x: &DMatrix<f64>) -> Result<()> {
    if ids.len() != x.nrows() {
        return Err(Error::InvalidSet(format!("{} ids for {} rows", ids.len(), x.nrows())));
    }
    Ok(())
}

pub fn ratio_score(numerator: f64, denominator: f64, eps_den: f64) -> f64 {
    numerator / denominator.max(eps_den)
}

/// Iteration-`i` scores, reusing numerators computed once per task.
pub fn score_iter_cached<H: Head>(
    numerators: &[f64],
    registry: &SubspaceRegistry,
    head: &H,
    set: &EmbeddingSet,
    iteration: usize,
    eps_den: f64,
) -> Result<Vec<ScoreRecord>> {
    score_iter_cached_rows(numerators, registry, head, set.ids(), &set.to_matrix(), iteration, eps_den)
}

/// [`score_iter_cached`] for f64 rows with their ids.
pub fn score_iter_cached_rows<H: Head>(
    numerators: &[f64],
    registry: &SubspaceRegistry,
    head: &H,
    ids: &[SampleId],
    x: &DMatrix<f64>,
    iteration: usize,
    eps_den: f64,
) -> Result<Vec<ScoreRecord>> {
    check_ids(ids, x)?;
    if numerators.len() != x.nrows() {
        return Err(Error::InvalidSet(format!(
            "{} cached numerators for {} samples",
            numerators.len(),
            x.nrows()
        )));
    }
    if registry.new_classes().is_empty() {
        return Err(Error::NoClasses);
    }
    let predictions = predict_rows(head, x)?;
    let mut denominators = vec![0.0; x.nrows()];
    for (class, subspace) in registry.new_classes() {
        let rows: Vec<usize> = (0..x.nrows()).filter(|i| predictions[*i].class_id == *class).collect();
        if rows.is_empty() {
            continue;
        }
        let fre = fre_rows(subspace, &x.select_rows(&rows))?;
        for (i, f) in rows.into_iter().zip(fre) {
            denominators[i] = f;
        }
    }
    for p in &predictions {
        if !registry.new_classes().contains_key(&p.class_id) {
            return Err(Error::MissingSubspace(p.class_id));
        }
    }
    Ok((0..x.nrows())
        .map(|i| ScoreRecord {
            sample_id: ids[i],
            numerator: numerators[i],
            denominator: Some(denominators[i]),
            score: ratio_score(numerators[i], denominators[i], eps_den),
            predicted_novel_class: Some(predictions[i].class_id),
            iteration,
        })
        .collect())
}

pub fn score_iter<H: Head>(
    registry: &SubspaceRegistry,
    head: &H,
    set: &EmbeddingSet,
    iteration: usize,
    eps_den: f64,
) -> Result<Vec<ScoreRecord>> {
    let numerators = old_class_numerators(registry, set)?;
    score_iter_cached(&numerators, registry, head, set, iteration, eps_den)
}

/// [`score_iter`] for f64 rows with their ids.
pub fn score_iter_rows<H: Head>(
    registry: &SubspaceRegistry,
    head: &H,
    ids: &[SampleId],
    x: &DMatrix<f64>,
    iteration: usize,
    eps_den: f64,
) -> Result<Vec<ScoreRecord>> {
    let numerators = old_class_numerators_rows(registry, x)?;
    score_iter_cached_rows(&numerators, registry, head, ids, x, iteration, eps_den)
}

/// Mean with a correction pass, so constant inputs return that constant.
fn mean(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    m + values.iter().map(|v| v - m).sum::<f64>() / n
}

/// `mean + k_std * std` with the population standard deviation.
pub fn compute_threshold(validation_scores: &[f64], k_std: f64) -> Result<Threshold> {
    if validation_scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let m = mean(validation_scores);
    let var = validation_scores.iter().map(|v| (v - m).powi(2)).sum::<f64>() / validation_scores.len() as f64;
    let std = var.sqrt();
    Ok(Threshold {
        value: m + k_std * std,
        k_std,
        source_mean: m,
        source_std: std,
    })
}

/// Inverse squared distance to the threshold, capped at `1 / eps_amb`.
pub fn ambiguity(score: f64, threshold: &Threshold, eps_amb: f64) -> f64 {
    1.0 / (score - threshold.value).powi(2).max(eps_amb)
}

fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidProbabilities("empty vector".into()));
    }
    if let Some(bad) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidProbabilities(format!("entry {bad}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidProbabilities(format!("sums to {sum}")));
    }
    Ok(())
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn entropy_score(p: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    Ok(-p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>())
}

/// Top-1 minus top-2 probability.
pub fn margin_score(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::InvalidProbabilities(format!("margin needs at least 2 classes, got {}", p.len())));
    }
    check_simplex(p)?;
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    Ok(first - second)
}
