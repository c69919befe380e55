//! Seeded Gaussian class clouds standing in for real backbone embeddings.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::EmbeddingSet;
use crate::{seed, ClassId, Error, Result};

/// Within-class covariance structure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassShape {
    /// `N(mean, sigma^2 I)`.
    #[default]
    Isotropic,
    /// Unit-variance Gaussian on a random `rank`-dimensional subspace per
    /// class, plus isotropic noise of standard deviation `residual_std`.
    LowRank { rank: usize, residual_std: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Pairwise distance between class means in units of the within-class
    /// standard deviation.
    pub separation: f64,
    pub seed: u64,
    #[serde(default)]
    pub shape: ClassShape,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, dim: usize, samples_per_class: usize, separation: f64, seed: u64) -> Self {
        Self {
            num_classes,
            dim,
            samples_per_class,
            separation,
            seed,
            shape: ClassShape::Isotropic,
        }
    }

    pub fn with_shape(mut self, shape: ClassShape) -> Self {
        self.shape = shape;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidSet("synthetic counts must all be at least 1".into()));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::InvalidSet(format!("separation {} must be positive", self.separation)));
        }
        if let ClassShape::LowRank { rank, residual_std } = self.shape {
            if rank == 0 || rank > self.dim {
                return Err(Error::InvalidSet(format!("class rank {rank} outside 1..={}", self.dim)));
            }
            if !(residual_std >= 0.0 && residual_std.is_finite()) {
                return Err(Error::InvalidSet(format!("residual std {residual_std} must be non-negative")));
            }
        }
        if self.num_classes > self.dim {
            return Err(Error::SeparationInfeasible {
                requested: self.num_classes,
                dim: self.dim,
                max_classes: self.dim,
            });
        }
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // filled row by row so the draw order does not depend on storage layout
    DMatrix::from_row_iterator(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Orthonormal columns spanning a random `k`-dimensional subspace of R^d.
fn random_orthonormal(rng: &mut impl Rng, d: usize, k: usize) -> DMatrix<f64> {
    let qr = gaussian_matrix(rng, d, k).qr();
    qr.q().columns(0, k).into_owned()
}

/// Class means on orthogonal random directions at radius `sep / sqrt(2)`, so
/// every pair sits exactly `sep` apart.
fn place_means(rng: &mut impl Rng, spec: &SyntheticSpec) -> DMatrix<f64> {
    let radius = spec.separation / std::f64::consts::SQRT_2;
    loop {
        let dirs = random_orthonormal(rng, spec.dim, spec.num_classes) * radius;
        let ok = (0..spec.num_classes).all(|a| {
            (a + 1..spec.num_classes).all(|b| (dirs.column(a) - dirs.column(b)).norm() >= spec.separation * (1.0 - 1e-9))
        });
        if ok {
            return dirs;
        }
    }
}

/// Labeled set of `num_classes * samples_per_class` rows, class by class.
/// A pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingSet> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);
    let means = place_means(&mut rng, spec);
    let d = spec.dim;
    let n = spec.samples_per_class;
    let mut features = Vec::with_capacity(spec.num_classes * n * d);
    let mut labels = Vec::with_capacity(spec.num_classes * n);
    for class in 0..spec.num_classes {
        let mean = means.column(class);
        match spec.shape {
            ClassShape::Isotropic => {
                for _ in 0..n {
                    for j in 0..d {
                        let z: f64 = rng.sample(StandardNormal);
                        features.push((mean[j] + z) as f32);
                    }
                    labels.push(ClassId(class as u32));
                }
            }
            ClassShape::LowRank { rank, residual_std } => {
                let basis = random_orthonormal(&mut rng, d, rank);
                for _ in 0..n {
                    let latent = gaussian_matrix(&mut rng, rank, 1);
                    let on_subspace = &basis * latent;
                    for j in 0..d {
                        let z: f64 = rng.sample(StandardNormal);
                        features.push((mean[j] + on_subspace[j] + residual_std * z) as f32);
                    }
                    labels.push(ClassId(class as u32));
                }
            }
        }
    }
    EmbeddingSet::new(d, features, Some(labels))
}
