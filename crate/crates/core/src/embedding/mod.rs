//! Embedding datasets: the sample currency of the whole engine.
//!
//! Features are held as `f32` (the on-disk precision) and widened to `f64`
//! whenever they enter numerical code.

mod cemb;
mod synthetic;

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::{ClassId, Error, Result, SampleId};

pub use cemb::{decode, encode, read_embeddings, read_header, write_embeddings, CembHeader, HEADER_LEN};
pub use synthetic::{generate_synthetic, ClassShape, SyntheticSpec};

/// An n×d feature matrix (row-major) with optional labels and stable ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    features: Vec<f32>,
    labels: Option<Vec<ClassId>>,
    ids: Vec<SampleId>,
}

impl EmbeddingSet {
    /// Builds a set with ids `0..n`.
    pub fn new(dim: usize, features: Vec<f32>, labels: Option<Vec<ClassId>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidSet("dimension must be at least 1".into()));
        }
        let n = features.len() / dim;
        let ids = (0..n as u64).map(SampleId).collect();
        Self::with_ids(dim, features, labels, ids)
    }

    pub fn with_ids(
        dim: usize,
        features: Vec<f32>,
        labels: Option<Vec<ClassId>>,
        ids: Vec<SampleId>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidSet("dimension must be at least 1".into()));
        }
        if !features.len().is_multiple_of(dim) {
            return Err(Error::InvalidSet(format!(
                "{} feature values do not form rows of width {dim}",
                features.len()
            )));
        }
        let n = features.len() / dim;
        if ids.len() != n {
            return Err(Error::InvalidSet(format!("{} ids for {n} rows", ids.len())));
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::InvalidSet(format!("{} labels for {n} rows", labels.len())));
            }
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::InvalidSet(format!("duplicate sample id {dup}")));
        }
        Ok(Self {
            dim,
            features,
            labels,
            ids,
        })
    }

    pub fn empty(dim: usize, labeled: bool) -> Result<Self> {
        Self::new(dim, Vec::new(), labeled.then(Vec::new))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn labels(&self) -> Option<&[ClassId]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<ClassId> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn ids(&self) -> &[SampleId] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> SampleId {
        self.ids[i]
    }

    /// Row index of every id.
    pub fn positions(&self) -> HashMap<SampleId, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (*id, i)).collect()
    }

    /// Rows at `indices`, keeping their ids and labels.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Self {
            dim: self.dim,
            features,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Same rows and ids with labels dropped.
    pub fn unlabeled(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// Same rows and ids with the given labels attached.
    pub fn relabeled(&self, labels: Vec<ClassId>) -> Result<Self> {
        Self::with_ids(self.dim, self.features.clone(), Some(labels), self.ids.clone())
    }

    /// Concatenates sets of equal dimension. The result is labeled only if
    /// every part is.
    pub fn concat(dim: usize, parts: &[&EmbeddingSet]) -> Result<Self> {
        let mut features = Vec::new();
        let mut ids = Vec::new();
        let labeled = parts.iter().all(|p| p.labels.is_some());
        let mut labels = labeled.then(Vec::new);
        for p in parts {
            if p.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: p.dim,
                });
            }
            features.extend_from_slice(&p.features);
            ids.extend_from_slice(&p.ids);
            if let (Some(dst), Some(src)) = (labels.as_mut(), p.labels.as_ref()) {
                dst.extend_from_slice(src);
            }
        }
        Self::with_ids(dim, features, labels, ids)
    }

    /// Features widened to an n×d `f64` matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.len(), self.dim, self.features.iter().map(|&v| f64::from(v)))
    }

    /// Same rows multiplied by `c` (useful for scale checks).
    pub fn scaled(&self, c: f32) -> Self {
        Self {
            features: self.features.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    /// Indices of rows grouped by label, in class order.
    pub fn indices_by_class(&self) -> std::collections::BTreeMap<ClassId, Vec<usize>> {
        let mut map = std::collections::BTreeMap::<ClassId, Vec<usize>>::new();
        if let Some(labels) = &self.labels {
            for (i, l) in labels.iter().enumerate() {
                map.entry(*l).or_default().push(i);
            }
        }
        map
    }
}
