//! Classification heads over frozen embeddings and their Adam training loop.
//!
//! [`ShortTermHead`] is a single linear softmax layer over the novel classes of
//! the task in progress. [`LongTermHead`] is a one-hidden-layer ReLU perceptron
//! over every class learned so far. Both minimize a per-sample weighted
//! cross-entropy `(1/n) * sum_i w_i * CE_i`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::{seed, ClassId, Error, Result};

pub const INIT_STD: f64 = 0.01;
pub const DEFAULT_HIDDEN: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl TrainConfig {
    pub fn short_term() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            ..Self::long_term()
        }
    }

    pub fn long_term() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 50,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1/beta2", "moment decay rates must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// Output of [`predict`]: the winning class and the full softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class_id: ClassId,
    pub index: usize,
    pub probabilities: Vec<f64>,
}

/// A trainable classifier with flat parameter blocks.
pub trait Head: Clone {
    fn class_ids(&self) -> &[ClassId];
    fn input_dim(&self) -> usize;
    /// n×K logits for an n×d batch.
    fn logits(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    /// Weighted mean cross-entropy and its gradient, one block per entry of
    /// [`Head::params`], laid out identically.
    fn loss_and_grad(&self, x: &DMatrix<f64>, targets: &[usize], weights: &[f64]) -> (f64, Vec<Vec<f64>>);
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_classes(&self) -> usize {
        self.class_ids().len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShortTermHead {
    /// K×d
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub class_ids: Vec<ClassId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongTermHead {
    /// H×d
    pub hidden_weights: DMatrix<f64>,
    pub hidden_bias: DVector<f64>,
    /// K×H
    pub output_weights: DMatrix<f64>,
    pub output_bias: DVector<f64>,
    pub class_ids: Vec<ClassId>,
}

impl LongTermHead {
    pub fn hidden_size(&self) -> usize {
        self.hidden_weights.nrows()
    }

    fn hidden(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * self.hidden_weights.transpose();
        add_bias(&mut z, &self.hidden_bias);
        z
    }
}

fn add_bias(m: &mut DMatrix<f64>, bias: &DVector<f64>) {
    for (mut col, b) in m.column_iter_mut().zip(bias.iter()) {
        col.add_scalar_mut(*b);
    }
}

/// Row-wise softmax (max-shifted) and the per-row log-sum-exp.
fn softmax_rows(logits: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let (n, k) = logits.shape();
    let mut probs = DMatrix::zeros(n, k);
    let mut lse = Vec::with_capacity(n);
    for i in 0..n {
        let row = logits.row(i);
        let max = row.max();
        let mut sum = 0.0;
        for j in 0..k {
            let e = (row[j] - max).exp();
            probs[(i, j)] = e;
            sum += e;
        }
        for j in 0..k {
            probs[(i, j)] /= sum;
        }
        lse.push(max + sum.ln());
    }
    (probs, lse)
}

/// Loss and dL/dlogits for a weighted mean cross-entropy.
fn cross_entropy(logits: &DMatrix<f64>, targets: &[usize], weights: &[f64]) -> (f64, DMatrix<f64>) {
    let n = logits.nrows();
    let (mut grad, lse) = softmax_rows(logits);
    let mut loss = 0.0;
    for i in 0..n {
        let w = weights[i] / n as f64;
        loss += w * (lse[i] - logits[(i, targets[i])]);
        grad[(i, targets[i])] -= 1.0;
        grad.row_mut(i).scale_mut(w);
    }
    (loss, grad)
}

fn column_sums(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| c.sum()).collect()
}

impl Head for ShortTermHead {
    fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn logits(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * self.weights.transpose();
        add_bias(&mut out, &self.bias);
        out
    }

    fn loss_and_grad(&self, x: &DMatrix<f64>, targets: &[usize], weights: &[f64]) -> (f64, Vec<Vec<f64>>) {
        let (loss, g) = cross_entropy(&self.logits(x), targets, weights);
        let dw = g.tr_mul(x);
        (loss, vec![dw.as_slice().to_vec(), column_sums(&g)])
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![self.weights.as_slice(), self.bias.as_slice()]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weights.as_mut_slice(), self.bias.as_mut_slice()]
    }
}

impl Head for LongTermHead {
    fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    fn input_dim(&self) -> usize {
        self.hidden_weights.ncols()
    }

    fn logits(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = self.hidden(x);
        a.apply(|v| *v = v.max(0.0));
        let mut out = a * self.output_weights.transpose();
        add_bias(&mut out, &self.output_bias);
        out
    }

    fn loss_and_grad(&self, x: &DMatrix<f64>, targets: &[usize], weights: &[f64]) -> (f64, Vec<Vec<f64>>) {
        let z = self.hidden(x);
        let a = z.map(|v| v.max(0.0));
        let mut logits = &a * self.output_weights.transpose();
        add_bias(&mut logits, &self.output_bias);
        let (loss, g) = cross_entropy(&logits, targets, weights);
        let dw2 = g.tr_mul(&a);
        let db2 = column_sums(&g);
        let mut dz = &g * &self.output_weights;
        dz.zip_apply(&z, |d, zv| {
            if zv <= 0.0 {
                *d = 0.0;
            }
        });
        let dw1 = dz.tr_mul(x);
        let db1 = column_sums(&dz);
        (
            loss,
            vec![dw1.as_slice().to_vec(), db1, dw2.as_slice().to_vec(), db2],
        )
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![
            self.hidden_weights.as_slice(),
            self.hidden_bias.as_slice(),
            self.output_weights.as_slice(),
            self.output_bias.as_slice(),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.hidden_weights.as_mut_slice(),
            self.hidden_bias.as_mut_slice(),
            self.output_weights.as_mut_slice(),
            self.output_bias.as_mut_slice(),
        ]
    }
}

fn check_classes(class_ids: &[ClassId]) -> Result<()> {
    if class_ids.is_empty() {
        return Err(Error::NoClasses);
    }
    let mut seen = std::collections::HashSet::new();
    for c in class_ids {
        if !seen.insert(*c) {
            return Err(Error::DuplicateClass(*c));
        }
    }
    Ok(())
}

fn gaussian_init(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    DMatrix::from_row_iterator(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)))
}

pub fn init_short_head(class_ids: &[ClassId], dim: usize, seed: u64) -> Result<ShortTermHead> {
    check_classes(class_ids)?;
    let mut rng = seed::rng(seed);
    Ok(ShortTermHead {
        weights: gaussian_init(&mut rng, class_ids.len(), dim),
        bias: DVector::zeros(class_ids.len()),
        class_ids: class_ids.to_vec(),
    })
}

pub fn init_long_head(class_ids: &[ClassId], dim: usize, hidden: usize, seed: u64) -> Result<LongTermHead> {
    check_classes(class_ids)?;
    if hidden == 0 {
        return Err(Error::config("hidden_size", "must be at least 1"));
    }
    let mut rng = seed::rng(seed);
    let hidden_weights = gaussian_init(&mut rng, hidden, dim);
    let output_weights = gaussian_init(&mut rng, class_ids.len(), hidden);
    Ok(LongTermHead {
        hidden_weights,
        hidden_bias: DVector::zeros(hidden),
        output_weights,
        output_bias: DVector::zeros(class_ids.len()),
        class_ids: class_ids.to_vec(),
    })
}

/// Appends one freshly initialized output row per new class. Every existing
/// parameter is left untouched.
pub fn expand_long_head(head: &LongTermHead, new_class_ids: &[ClassId], seed: u64) -> Result<LongTermHead> {
    let mut all = head.class_ids.clone();
    all.extend_from_slice(new_class_ids);
    check_classes(&all)?;
    if new_class_ids.is_empty() {
        return Ok(head.clone());
    }
    let k_old = head.class_ids.len();
    let k_new = new_class_ids.len();
    let mut rng = seed::rng(seed);
    let fresh = gaussian_init(&mut rng, k_new, head.hidden_size());
    let mut output_weights = head.output_weights.clone().insert_rows(k_old, k_new, 0.0);
    output_weights.rows_mut(k_old, k_new).copy_from(&fresh);
    let output_bias = head.output_bias.clone().insert_rows(k_old, k_new, 0.0);
    Ok(LongTermHead {
        hidden_weights: head.hidden_weights.clone(),
        hidden_bias: head.hidden_bias.clone(),
        output_weights,
        output_bias,
        class_ids: all,
    })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn prediction_from_logits<H: Head>(head: &H, logits: &DMatrix<f64>) -> Vec<Prediction> {
    let (probs, _) = softmax_rows(logits);
    (0..probs.nrows())
        .map(|i| {
            let p: Vec<f64> = probs.row(i).iter().copied().collect();
            let index = argmax(&p);
            Prediction {
                class_id: head.class_ids()[index],
                index,
                probabilities: p,
            }
        })
        .collect()
}

pub fn predict<H: Head>(head: &H, u: &[f64]) -> Result<Prediction> {
    if u.len() != head.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: head.input_dim(),
            found: u.len(),
        });
    }
    let x = DMatrix::from_row_slice(1, u.len(), u);
    Ok(prediction_from_logits(head, &head.logits(&x)).remove(0))
}

const PREDICT_CHUNK: usize = 512;

/// Logits for every row of a set, computed in chunks.
pub fn logits_set<H: Head>(head: &H, set: &EmbeddingSet) -> Result<DMatrix<f64>> {
    if set.dim() != head.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: head.input_dim(),
            found: set.dim(),
        });
    }
    let k = head.num_classes();
    let mut out = DMatrix::zeros(set.len(), k);
    let mut start = 0;
    while start < set.len() {
        let end = (start + PREDICT_CHUNK).min(set.len());
        let idx: Vec<usize> = (start..end).collect();
        let logits = head.logits(&set.subset(&idx).to_matrix());
        out.rows_mut(start, end - start).copy_from(&logits);
        start = end;
    }
    Ok(out)
}

/// Predictions for the rows of an `n x d` matrix.
pub fn predict_rows<H: Head>(head: &H, x: &DMatrix<f64>) -> Result<Vec<Prediction>> {
    if x.ncols() != head.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: head.input_dim(),
            found: x.ncols(),
        });
    }
    Ok(prediction_from_logits(head, &head.logits(x)))
}

pub fn predict_set<H: Head>(head: &H, set: &EmbeddingSet) -> Result<Vec<Prediction>> {
    Ok(prediction_from_logits(head, &logits_set(head, set)?))
}

/// Adam with bias-corrected first and second moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, block_lens: &[usize]) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            t: 0,
            m: block_lens.iter().map(|&l| vec![0.0; l]).collect(),
            v: block_lens.iter().map(|&l| vec![0.0; l]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (b, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[b], &mut self.v[b], &grads[b]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Output index of every label; errors on labels the head does not know.
pub fn targets_for<H: Head>(head: &H, samples: &EmbeddingSet) -> Result<Vec<usize>> {
    let index: HashMap<ClassId, usize> = head.class_ids().iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let labels = samples
        .labels()
        .ok_or_else(|| Error::EmptyTrainingSet("training samples carry no labels".into()))?;
    labels
        .iter()
        .map(|l| index.get(l).copied().ok_or(Error::UnknownLabel(*l)))
        .collect()
}

fn normalized_weights(weights: &[f64], n: usize) -> Result<Vec<f64>> {
    if weights.len() != n {
        return Err(Error::InvalidSet(format!("{} sample weights for {n} samples", weights.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidSet("sample weights must be finite and non-negative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if n > 0 && sum <= 0.0 {
        return Err(Error::InvalidSet("sample weights sum to zero".into()));
    }
    // rescaled to mean 1 so the batch loss is an unbiased estimate of sum(w*CE)/sum(w)
    Ok(weights.iter().map(|w| w * n as f64 / sum).collect())
}

/// `sum_i w_i CE_i / sum_i w_i` over the whole set.
pub fn weighted_loss<H: Head>(head: &H, samples: &EmbeddingSet, sample_weights: &[f64]) -> Result<f64> {
    let targets = targets_for(head, samples)?;
    let weights = normalized_weights(sample_weights, samples.len())?;
    if samples.is_empty() {
        return Ok(0.0);
    }
    let logits = logits_set(head, samples)?;
    let (_, lse) = softmax_rows(&logits);
    let total: f64 = (0..samples.len())
        .map(|i| weights[i] * (lse[i] - logits[(i, targets[i])]))
        .sum();
    Ok(total / samples.len() as f64)
}

/// Trains `head` in place; returns the mean minibatch loss of every epoch.
pub fn fit_head<H: Head>(head: &mut H, samples: &EmbeddingSet, sample_weights: &[f64], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if samples.dim() != head.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: head.input_dim(),
            found: samples.dim(),
        });
    }
    let targets = targets_for(head, samples)?;
    let weights = normalized_weights(sample_weights, samples.len())?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if samples.is_empty() {
        return Err(Error::EmptyTrainingSet("no samples".into()));
    }
    let n = samples.len();
    let x = samples.to_matrix();
    let block_lens: Vec<usize> = head.params().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(cfg, &block_lens);
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(chunk);
            let tb: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let wb: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();
            let (loss, grads) = head.loss_and_grad(&xb, &tb, &wb);
            adam.step(head.params_mut(), &grads);
            epoch_loss += loss;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok(history)
}

/// Returns a trained copy of `head`.
pub fn train_head<H: Head>(head: &H, samples: &EmbeddingSet, sample_weights: &[f64], cfg: &TrainConfig) -> Result<H> {
    let mut trained = head.clone();
    fit_head(&mut trained, samples, sample_weights, cfg)?;
    Ok(trained)
}
