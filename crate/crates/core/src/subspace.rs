//! Per-class PCA subspaces and feature reconstruction error (FRE).
//!
//! A class is summarized by its mean and the leading principal directions of
//! its centered samples. The FRE of a query is the norm of the part of
//! `u - mean` that those directions cannot reconstruct.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::embedding::EmbeddingSet;
use crate::{ClassId, Error, Result};

pub const DEFAULT_VARIANCE_RETAINED: f64 = 0.995;
/// Below this many samples the subspace keeps no components and FRE falls
/// back to distance from the mean.
pub const MIN_SAMPLES_FOR_COMPONENTS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSubspace {
    pub class_id: ClassId,
    pub mean: DVector<f64>,
    /// q×d, orthonormal rows, ordered by decreasing explained variance.
    pub components: DMatrix<f64>,
    pub variance_retained: f64,
    /// Explained-variance fraction of each kept component.
    pub explained: Vec<f64>,
    pub n_fit: usize,
}

impl ClassSubspace {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.components.nrows()
    }

    /// Largest deviation of `P P^T` from the identity.
    pub fn gram_error(&self) -> f64 {
        let q = self.rank();
        let gram = &self.components * self.components.transpose();
        (gram - DMatrix::<f64>::identity(q, q)).abs().max()
    }

    /// FRE of a query already widened to f64.
    pub fn fre(&self, u: &[f64]) -> Result<f64> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: u.len(),
            });
        }
        Ok(self.residual_norm(u.iter().copied()))
    }

    pub fn fre_f32(&self, u: &[f32]) -> Result<f64> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: u.len(),
            });
        }
        Ok(self.residual_norm(u.iter().map(|&v| f64::from(v))))
    }

    fn residual_norm(&self, u: impl Iterator<Item = f64>) -> f64 {
        let centered: DVector<f64> = DVector::from_iterator(self.dim(), u.zip(self.mean.iter()).map(|(x, m)| x - m));
        if self.rank() == 0 {
            return centered.norm();
        }
        let coords = &self.components * &centered;
        let residual = centered - self.components.tr_mul(&coords);
        residual.norm()
    }
}

/// Column mean of the rows, with a second pass that removes the rounding
/// error of the first (identical rows give back that row exactly).
fn column_mean(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    let mut mean = x.row_mean().transpose();
    let correction = x
        .row_iter()
        .fold(DVector::zeros(x.ncols()), |acc, r| acc + (r.transpose() - &mean))
        / n;
    mean += correction;
    mean
}

/// Flips `v` so its first clearly nonzero entry is positive.
fn fix_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Fits a class subspace to an n×d matrix. Keeps the fewest leading components
/// whose cumulative explained variance reaches `variance_retained`.
pub fn fit_subspace(features: &DMatrix<f64>, class_id: ClassId, variance_retained: f64) -> Result<ClassSubspace> {
    let n = features.nrows();
    let d = features.ncols();
    if n == 0 {
        return Err(Error::EmptyFit);
    }
    if !(variance_retained > 0.0 && variance_retained <= 1.0) {
        return Err(Error::config(
            "variance_retained",
            format!("{variance_retained} is outside (0, 1]"),
        ));
    }
    let mean = column_mean(features);
    let empty = |mean: DVector<f64>| ClassSubspace {
        class_id,
        mean,
        components: DMatrix::zeros(0, d),
        variance_retained,
        explained: Vec::new(),
        n_fit: n,
    };
    if n < MIN_SAMPLES_FOR_COMPONENTS {
        return Ok(empty(mean));
    }
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let scale = features.abs().max().max(1.0);
    let total_ss: f64 = centered.iter().map(|v| v * v).sum();
    // zero spread up to rounding of the mean
    if total_ss <= (1e-12 * scale).powi(2) * (n * d) as f64 {
        return Ok(empty(mean));
    }

    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let energy: Vec<f64> = order.iter().map(|&k| svd.singular_values[k].powi(2)).collect();
    let total: f64 = energy.iter().sum();

    let max_rank = (n - 1).min(d);
    let mut q = 0;
    let mut cumulative = 0.0;
    for e in energy.iter().take(max_rank) {
        cumulative += e;
        q += 1;
        if cumulative / total >= variance_retained - 1e-12 {
            break;
        }
    }

    let mut components = DMatrix::zeros(q, d);
    for (row, &k) in order.iter().take(q).enumerate() {
        let mut v: Vec<f64> = v_t.row(k).iter().copied().collect();
        fix_sign(&mut v);
        for (j, x) in v.into_iter().enumerate() {
            components[(row, j)] = x;
        }
    }
    Ok(ClassSubspace {
        class_id,
        mean,
        components,
        variance_retained,
        explained: energy[..q].iter().map(|e| e / total).collect(),
        n_fit: n,
    })
}

/// Fits a subspace to the given rows of a set.
pub fn fit_rows(set: &EmbeddingSet, rows: &[usize], class_id: ClassId, variance_retained: f64) -> Result<ClassSubspace> {
    fit_subspace(&set.subset(rows).to_matrix(), class_id, variance_retained)
}

pub fn fre(subspace: &ClassSubspace, u: &[f64]) -> Result<f64> {
    subspace.fre(u)
}

/// FRE of every row; identical to calling [`fre`] row by row.
pub fn fre_batch(subspace: &ClassSubspace, set: &EmbeddingSet) -> Result<Vec<f64>> {
    if set.dim() != subspace.dim() {
        return Err(Error::DimensionMismatch {
            expected: subspace.dim(),
            found: set.dim(),
        });
    }
    Ok((0..set.len())
        .into_par_iter()
        .map(|i| subspace.residual_norm(set.row(i).iter().map(|&v| f64::from(v))))
        .collect())
}

/// FRE of every row of an `n x d` matrix, for callers working in f64.
pub fn fre_rows(subspace: &ClassSubspace, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x.ncols() != subspace.dim() {
        return Err(Error::DimensionMismatch {
            expected: subspace.dim(),
            found: x.ncols(),
        });
    }
    Ok((0..x.nrows())
        .into_par_iter()
        .map(|i| subspace.residual_norm(x.row(i).iter().copied()))
        .collect())
}

/// Frozen old-class subspaces plus the novel-class estimates of the task in
/// progress.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SubspaceRegistry {
    old: BTreeMap<ClassId, ClassSubspace>,
    new: BTreeMap<ClassId, ClassSubspace>,
    generation: usize,
}

impl SubspaceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn old(&self) -> &BTreeMap<ClassId, ClassSubspace> {
        &self.old
    }

    pub fn new_classes(&self) -> &BTreeMap<ClassId, ClassSubspace> {
        &self.new
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn insert_old(&mut self, subspace: ClassSubspace) -> Result<()> {
        let id = subspace.class_id;
        if self.old.contains_key(&id) || self.new.contains_key(&id) {
            return Err(Error::DuplicateClass(id));
        }
        self.old.insert(id, subspace);
        Ok(())
    }

    /// Replaces every novel-class estimate and bumps the generation.
    pub fn replace_new(&mut self, subspaces: impl IntoIterator<Item = ClassSubspace>) -> Result<()> {
        let mut map = BTreeMap::new();
        for s in subspaces {
            if self.old.contains_key(&s.class_id) {
                return Err(Error::DuplicateClass(s.class_id));
            }
            map.insert(s.class_id, s);
        }
        self.new = map;
        self.generation += 1;
        Ok(())
    }

    /// Moves the novel-class subspaces into the frozen set.
    pub fn promote_new(&mut self) {
        let new = std::mem::take(&mut self.new);
        self.old.extend(new);
        self.generation = 0;
    }

    pub fn clear_new(&mut self) {
        self.new.clear();
        self.generation = 0;
    }
}
