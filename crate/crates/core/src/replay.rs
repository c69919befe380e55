//! Fixed-capacity, class-balanced experience replay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::heads::{fit_head, weighted_loss, LongTermHead, TrainConfig};
use crate::{ClassId, Error, Result, SampleId};

pub const DEFAULT_CAPACITY: usize = 2500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// Label came from the oracle (or from supervised pretraining).
    Active,
    /// Label was assigned by the engine.
    Pseudo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub sample_id: SampleId,
    pub embedding: Vec<f32>,
    pub label: ClassId,
    pub provenance: Provenance,
    seq: u64,
}

/// What an insert did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InsertReport {
    pub inserted: usize,
    /// Classes an entry was evicted from, one element per eviction, in order.
    pub evictions: Vec<ClassId>,
    /// Classes whose incoming samples alone exceeded the capacity.
    pub truncated: Vec<ClassId>,
}

impl InsertReport {
    pub fn evicted(&self) -> bool {
        !self.evictions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    dim: usize,
    entries: Vec<BufferEntry>,
    next_seq: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("buffer_capacity", "must be at least 1"));
        }
        Ok(Self {
            capacity,
            dim,
            entries: Vec::new(),
            next_seq: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn counts(&self) -> BTreeMap<ClassId, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.label).or_insert(0) += 1;
        }
        counts
    }

    /// Buffer contents as a labeled set (ids preserved).
    pub fn to_set(&self) -> Result<EmbeddingSet> {
        let features = self.entries.iter().flat_map(|e| e.embedding.iter().copied()).collect();
        EmbeddingSet::with_ids(
            self.dim,
            features,
            Some(self.entries.iter().map(|e| e.label).collect()),
            self.entries.iter().map(|e| e.sample_id).collect(),
        )
    }

    /// Adds every labeled row of `samples`. When the buffer would overflow,
    /// entries are evicted one at a time from a most-populous class (cycling
    /// through tied classes, oldest entry first) until everything fits.
    pub fn insert_balanced(&mut self, samples: &EmbeddingSet, provenance: Provenance) -> Result<InsertReport> {
        let labels = samples
            .labels()
            .ok_or_else(|| Error::InvalidSet("replay buffer needs labeled samples".into()))?;
        if samples.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: samples.dim(),
            });
        }
        let mut report = InsertReport {
            inserted: samples.len(),
            ..Default::default()
        };
        let mut incoming = BTreeMap::<ClassId, usize>::new();
        for l in labels {
            *incoming.entry(*l).or_insert(0) += 1;
        }
        report.truncated = incoming
            .iter()
            .filter(|(_, n)| **n > self.capacity)
            .map(|(c, _)| *c)
            .collect();

        for i in 0..samples.len() {
            self.entries.push(BufferEntry {
                sample_id: samples.id(i),
                embedding: samples.row(i).to_vec(),
                label: labels[i],
                provenance,
                seq: self.next_seq,
            });
            self.next_seq += 1;
        }

        let mut counts = self.counts();
        let mut last: Option<ClassId> = None;
        while self.entries.len() > self.capacity {
            let max = *counts.values().max().expect("non-empty buffer");
            let tied: Vec<ClassId> = counts.iter().filter(|(_, n)| **n == max).map(|(c, _)| *c).collect();
            let victim = match last {
                Some(prev) => *tied.iter().find(|c| **c > prev).unwrap_or(&tied[0]),
                None => tied[0],
            };
            let pos = self
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.label == victim)
                .min_by_key(|(_, e)| e.seq)
                .map(|(i, _)| i)
                .expect("victim class has entries");
            self.entries.remove(pos);
            *counts.get_mut(&victim).unwrap() -= 1;
            report.evictions.push(victim);
            last = Some(victim);
        }
        Ok(report)
    }
}

/// Weights of the three replay loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.25,
            gamma: 0.25,
            theta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("beta", self.beta), ("gamma", self.gamma), ("theta", self.theta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("{v} must be non-negative")));
            }
        }
        if self.beta + self.gamma + self.theta <= 0.0 {
            return Err(Error::config("beta", "beta + gamma + theta must be positive"));
        }
        Ok(())
    }
}

/// `beta * L_al + gamma * L_pl + theta * L_buffer`; pass 0 for an empty set.
pub fn compose_replay_loss(loss_al: f64, loss_pl: f64, loss_buffer: f64, w: &LossWeights) -> f64 {
    w.beta * loss_al + w.gamma * loss_pl + w.theta * loss_buffer
}

/// Training set and per-sample weights such that the weighted mean loss over
/// the union equals the three-term replay loss (divided by the sum of the
/// weights of the non-empty terms).
pub fn replay_training_set(
    buffer: &ReplayBuffer,
    new_al: &EmbeddingSet,
    new_pl: &EmbeddingSet,
    w: &LossWeights,
) -> Result<(EmbeddingSet, Vec<f64>)> {
    w.validate()?;
    let buffered = buffer.to_set()?;
    let mut parts = Vec::new();
    let mut weights = Vec::new();
    for (set, weight) in [(new_al, w.beta), (new_pl, w.gamma), (&buffered, w.theta)] {
        if set.is_empty() || weight == 0.0 {
            continue;
        }
        if set.labels().is_none() {
            return Err(Error::InvalidSet("replay sets must be labeled".into()));
        }
        weights.extend(std::iter::repeat_n(weight / set.len() as f64, set.len()));
        parts.push(set);
    }
    if parts.is_empty() {
        return Err(Error::EmptyTrainingSet("active, pseudo-labeled and buffer sets are all empty".into()));
    }
    let union = EmbeddingSet::concat(buffer.dim, &parts)?;
    Ok((union, weights))
}

/// Updates the long-term head on active labels, pseudo-labels and the buffer.
pub fn replay_update(
    head: &LongTermHead,
    buffer: &ReplayBuffer,
    new_al: &EmbeddingSet,
    new_pl: &EmbeddingSet,
    w: &LossWeights,
    cfg: &TrainConfig,
) -> Result<LongTermHead> {
    let (union, weights) = replay_training_set(buffer, new_al, new_pl, w)?;
    let mut trained = head.clone();
    fit_head(&mut trained, &union, &weights, cfg)?;
    Ok(trained)
}

/// The three-term replay loss of `head`, with each term the mean
/// cross-entropy over its set.
pub fn replay_objective(
    head: &LongTermHead,
    buffer: &ReplayBuffer,
    new_al: &EmbeddingSet,
    new_pl: &EmbeddingSet,
    w: &LossWeights,
) -> Result<f64> {
    let term = |s: &EmbeddingSet| -> Result<f64> {
        if s.is_empty() {
            Ok(0.0)
        } else {
            weighted_loss(head, s, &vec![1.0; s.len()])
        }
    };
    Ok(compose_replay_loss(term(new_al)?, term(new_pl)?, term(&buffer.to_set()?)?, w))
}
