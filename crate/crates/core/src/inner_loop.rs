//! Per-task controller: score the pool, query the oracle, pseudo-label, refit,
//! and finally consolidate everything into the long-term agent.
//!
//! The same controller runs every strategy of the benchmark. A [`LoopPolicy`]
//! selects the score family (FRE ratio or classifier entropy), the query rule
//! and whether pseudo-labeling is on.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::IndexedRandom;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::heads::{
    expand_long_head, fit_head, init_long_head, init_short_head, logits_set, LongTermHead, ShortTermHead,
    TrainConfig,
};
use crate::replay::{replay_update, LossWeights, Provenance, ReplayBuffer};
use crate::scoring::{
    ambiguity, compute_threshold, entropy_score, old_class_numerators, score_iter_cached, ScoreRecord, Threshold,
};
use crate::subspace::{fit_rows, SubspaceRegistry, DEFAULT_VARIANCE_RETAINED};
use crate::{seed, ClassId, Error, Result, SampleId};

/// Which uncertainty score drives thresholds, queries and pseudo-labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreKind {
    /// Min old-class FRE at iteration 0, FRE ratio afterwards.
    Fre,
    /// Entropy of the softmax over all classes known to the agent.
    Entropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryRule {
    /// Closest to the threshold (inverse squared distance).
    Ambiguity,
    /// Highest score.
    Top,
    /// Uniform over the unlabeled pool.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopPolicy {
    pub score: ScoreKind,
    pub query: QueryRule,
    pub pseudo_label: bool,
    /// Spend the whole budget at iteration 0 and pseudo-label at most once.
    pub one_shot: bool,
}

impl LoopPolicy {
    pub const CUAL: LoopPolicy = LoopPolicy {
        score: ScoreKind::Fre,
        query: QueryRule::Ambiguity,
        pseudo_label: true,
        one_shot: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Fraction of above-threshold samples pseudo-labeled per iteration.
    pub alpha: f64,
    /// Standard deviations above the validation mean for the threshold.
    pub k_std: f64,
    pub max_iterations: usize,
    /// Oracle budget as a fraction of the pool size.
    pub budget_fraction: f64,
    pub eps_den: f64,
    pub eps_amb: f64,
    pub variance_retained: f64,
    /// Share of each new class's samples held out for validation.
    pub validation_rate: f64,
    pub validation_min_per_class: usize,
    pub short: TrainConfig,
    pub long: TrainConfig,
    pub loss_weights: LossWeights,
    pub policy: LoopPolicy,
    /// Restrict ambiguity and top queries after iteration 0 to samples scoring
    /// above the threshold (predicted novel).
    pub query_novel_only: bool,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            alpha: 0.20,
            k_std: 2.0,
            max_iterations: 5,
            budget_fraction: 0.0125,
            eps_den: crate::scoring::DEFAULT_EPS_DEN,
            eps_amb: crate::scoring::DEFAULT_EPS_AMB,
            variance_retained: DEFAULT_VARIANCE_RETAINED,
            validation_rate: 0.001,
            validation_min_per_class: 5,
            short: TrainConfig::short_term(),
            long: TrainConfig::long_term(),
            loss_weights: LossWeights::default(),
            policy: LoopPolicy::CUAL,
            query_novel_only: true,
            seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha", format!("{} is outside (0, 1]", self.alpha)));
        }
        if !(self.k_std >= 0.0 && self.k_std.is_finite()) {
            return Err(Error::config("k_std", "must be non-negative"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.budget_fraction) {
            return Err(Error::config("budget_fraction", "must lie in [0, 1]"));
        }
        if !(self.eps_den > 0.0) {
            return Err(Error::config("eps_den", "must be positive"));
        }
        if !(self.eps_amb > 0.0) {
            return Err(Error::config("eps_amb", "must be positive"));
        }
        if !(self.variance_retained > 0.0 && self.variance_retained <= 1.0) {
            return Err(Error::config("variance_retained", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.validation_rate) {
            return Err(Error::config("validation_rate", "must lie in [0, 1)"));
        }
        self.short.validate()?;
        self.long.validate()?;
        self.loss_weights.validate()
    }
}

/// Source of ground-truth labels for queried samples.
pub trait LabelOracle {
    fn label(&mut self, ids: &[SampleId]) -> Result<Vec<ClassId>>;
    /// Number of samples labeled so far.
    fn calls(&self) -> usize;
}

/// Oracle budget of a pool: `ceil(fraction * n)`, at least 1 unless the
/// fraction is zero.
pub fn budget_for_pool(fraction: f64, pool_len: usize) -> usize {
    if fraction <= 0.0 || pool_len == 0 {
        return 0;
    }
    ((fraction * pool_len as f64 - 1e-9).ceil() as usize).max(1)
}

/// Even split of the budget over `iterations`, remainder to iteration 0.
pub fn allocate_quota(budget_total: usize, iterations: usize, i: usize) -> usize {
    let base = budget_total / iterations;
    if i == 0 {
        base + budget_total % iterations
    } else {
        base
    }
}

/// Uniform sample without replacement of up to `quota` ids.
pub fn uniform_query(candidates: &[SampleId], quota: usize, rng: &mut ChaCha8Rng) -> Vec<SampleId> {
    candidates.choose_multiple(rng, quota.min(candidates.len())).copied().collect()
}

/// Iteration-0 query: uniform over the samples scoring above the threshold.
pub fn initial_query(records: &[ScoreRecord], threshold: &Threshold, quota: usize, rng: &mut ChaCha8Rng) -> Vec<SampleId> {
    let above: Vec<SampleId> = records
        .iter()
        .filter(|r| r.score > threshold.value)
        .map(|r| r.sample_id)
        .collect();
    uniform_query(&above, quota, rng)
}

/// The `quota` unexcluded samples with the highest ambiguity; ties go to the
/// lower sample id.
pub fn ambiguous_query(
    records: &[ScoreRecord],
    threshold: &Threshold,
    quota: usize,
    excluded: &HashSet<SampleId>,
    eps_amb: f64,
) -> Vec<SampleId> {
    let mut ranked: Vec<(f64, SampleId)> = records
        .iter()
        .filter(|r| !excluded.contains(&r.sample_id))
        .map(|r| (ambiguity(r.score, threshold, eps_amb), r.sample_id))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(quota).map(|(_, id)| id).collect()
}

/// The `quota` unexcluded samples with the highest score.
pub fn top_query(records: &[ScoreRecord], quota: usize, excluded: &HashSet<SampleId>) -> Vec<SampleId> {
    let mut ranked: Vec<&ScoreRecord> = records.iter().filter(|r| !excluded.contains(&r.sample_id)).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.sample_id.cmp(&b.sample_id)));
    ranked.into_iter().take(quota).map(|r| r.sample_id).collect()
}

/// `floor(alpha * n)` guarded against products like `0.29 * 100 = 28.999...`.
pub fn alpha_count(alpha: f64, n: usize) -> usize {
    (alpha * n as f64 + 1e-9).floor() as usize
}

/// Among unexcluded samples above the threshold, the `floor(alpha * count)`
/// highest scorers, each labeled with its predicted novel class.
pub fn pseudo_label_select(
    records: &[ScoreRecord],
    threshold: &Threshold,
    alpha: f64,
    excluded: &HashSet<SampleId>,
) -> Vec<(SampleId, ClassId)> {
    let mut above: Vec<&ScoreRecord> = records
        .iter()
        .filter(|r| r.score > threshold.value && !excluded.contains(&r.sample_id))
        .filter(|r| r.predicted_novel_class.is_some())
        .collect();
    let take = alpha_count(alpha, above.len());
    above.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.sample_id.cmp(&b.sample_id)));
    above
        .into_iter()
        .take(take)
        .map(|r| (r.sample_id, r.predicted_novel_class.expect("filtered")))
        .collect()
}

/// Entropy-family pseudo-labels: among unexcluded samples predicted as a
/// novel class, the `floor(alpha * count)` with the lowest entropy.
pub fn lowest_entropy_select(records: &[ScoreRecord], alpha: f64, excluded: &HashSet<SampleId>) -> Vec<(SampleId, ClassId)> {
    let mut novel: Vec<&ScoreRecord> = records
        .iter()
        .filter(|r| r.predicted_novel_class.is_some() && !excluded.contains(&r.sample_id))
        .collect();
    let take = alpha_count(alpha, novel.len());
    novel.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.sample_id.cmp(&b.sample_id)));
    novel
        .into_iter()
        .take(take)
        .map(|r| (r.sample_id, r.predicted_novel_class.expect("filtered")))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NothingAboveThreshold,
    IterationCap,
    NoNovelClasses,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoopDecision {
    /// Keep iterating; `query` is false once the budget is spent.
    Continue { query: bool },
    Stop(StopReason),
}

/// Stops when no unexcluded sample scores above the threshold or the
/// iteration cap is reached. Querying pauses once the budget is gone while
/// pseudo-labeling may continue.
pub fn check_stop(
    records: &[ScoreRecord],
    threshold: &Threshold,
    excluded: &HashSet<SampleId>,
    iteration: usize,
    max_iterations: usize,
    budget_remaining: usize,
) -> LoopDecision {
    if iteration >= max_iterations {
        return LoopDecision::Stop(StopReason::IterationCap);
    }
    let any_above = records
        .iter()
        .any(|r| r.score > threshold.value && !excluded.contains(&r.sample_id));
    if !any_above {
        return LoopDecision::Stop(StopReason::NothingAboveThreshold);
    }
    LoopDecision::Continue {
        query: budget_remaining > 0,
    }
}

/// The long-lived state carried across tasks.
#[derive(Clone, Debug)]
pub struct Agent {
    pub registry: SubspaceRegistry,
    pub long_head: LongTermHead,
    pub buffer: ReplayBuffer,
    /// Held-out labeled samples of learned classes, used for thresholds.
    pub validation: EmbeddingSet,
}

/// How many of a class's `n` samples go to the validation store.
pub fn holdout_count(n: usize, rate: f64, min_per_class: usize) -> usize {
    let wanted = ((rate * n as f64).ceil() as usize).max(min_per_class);
    wanted.min(n / 4)
}

impl Agent {
    /// Supervised start: holds out validation samples, fits one subspace per
    /// class, trains the long-term head and fills the buffer.
    pub fn pretrain(data: &EmbeddingSet, hidden: usize, buffer_capacity: usize, cfg: &LoopConfig) -> Result<Agent> {
        cfg.validate()?;
        let by_class = data.indices_by_class();
        if by_class.is_empty() {
            return Err(Error::EmptyTrainingSet("pretraining data has no labeled samples".into()));
        }
        let mut rng = seed::derived_rng(cfg.seed, "pretrain/holdout");
        let mut registry = SubspaceRegistry::new();
        let mut train_rows = Vec::new();
        let mut val_rows = Vec::new();
        for (class, rows) in &by_class {
            let mut rows = rows.clone();
            rows.shuffle(&mut rng);
            let h = holdout_count(rows.len(), cfg.validation_rate, cfg.validation_min_per_class);
            val_rows.extend_from_slice(&rows[..h]);
            let mut keep = rows[h..].to_vec();
            keep.sort_unstable();
            registry.insert_old(fit_rows(data, &keep, *class, cfg.variance_retained)?)?;
            train_rows.extend(keep);
        }
        train_rows.sort_unstable();
        val_rows.sort_unstable();
        let train = data.subset(&train_rows);
        let classes: Vec<ClassId> = by_class.keys().copied().collect();
        let mut head = init_long_head(&classes, data.dim(), hidden, seed::derive(cfg.seed, "pretrain/init"))?;
        fit_head(
            &mut head,
            &train,
            &vec![1.0; train.len()],
            &cfg.long.with_seed(seed::derive(cfg.seed, "pretrain/train")),
        )?;
        let mut buffer = ReplayBuffer::new(buffer_capacity, data.dim())?;
        buffer.insert_balanced(&train, Provenance::Active)?;
        Ok(Agent {
            registry,
            long_head: head,
            buffer,
            validation: data.subset(&val_rows),
        })
    }

    pub fn learned_classes(&self) -> &[ClassId] {
        &self.long_head.class_ids
    }
}

/// One row of the per-iteration trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub task: usize,
    pub iteration: usize,
    pub threshold: f64,
    pub threshold_mean: f64,
    pub threshold_std: f64,
    pub above_threshold: usize,
    pub queried: Vec<SampleId>,
    pub oracle_labels: Vec<ClassId>,
    pub pseudo_labeled: Vec<SampleId>,
    pub discovered: Vec<ClassId>,
    pub budget_used: usize,
    pub budget_total: usize,
    pub stop: Option<StopReason>,
}

/// Mutable state of the task in progress.
#[derive(Clone, Debug)]
pub struct TaskState {
    pub task_index: usize,
    pub budget_total: usize,
    pub budget_used: usize,
    pub iteration: usize,
    /// Oracle labels, old classes included.
    pub al_store: BTreeMap<SampleId, ClassId>,
    pub pl_store: BTreeMap<SampleId, ClassId>,
    pub discovered: BTreeSet<ClassId>,
    pub short_head: Option<ShortTermHead>,
    pub frozen_numerators: Vec<f64>,
}

impl TaskState {
    fn labeled(&self) -> HashSet<SampleId> {
        self.al_store.keys().chain(self.pl_store.keys()).copied().collect()
    }

    fn quota(&self, schedule: &[usize], i: usize) -> usize {
        let allowed: usize = schedule[..=i.min(schedule.len() - 1)].iter().sum();
        allowed.saturating_sub(self.budget_used).min(self.budget_total - self.budget_used)
    }
}

#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub task_index: usize,
    pub budget_total: usize,
    pub labels_spent: usize,
    pub discovered: Vec<ClassId>,
    pub active_labels: BTreeMap<SampleId, ClassId>,
    pub pseudo_labels: BTreeMap<SampleId, ClassId>,
    /// Whether the agent was updated (false when nothing novel was found).
    pub updated: bool,
    pub trace: Vec<IterationTrace>,
}

/// Scores a set under the policy's score family.
struct Scorer<'a> {
    agent: &'a Agent,
    cfg: &'a LoopConfig,
}

impl Scorer<'_> {
    fn long_probabilities(&self, set: &EmbeddingSet, short: Option<&ShortTermHead>) -> Result<Vec<Vec<f64>>> {
        let long = logits_set(&self.agent.long_head, set)?;
        let short = short.map(|h| logits_set(h, set)).transpose()?;
        Ok((0..set.len())
            .map(|i| {
                let mut row: Vec<f64> = long.row(i).iter().copied().collect();
                if let Some(s) = &short {
                    row.extend(s.row(i).iter().copied());
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
                row
            })
            .collect())
    }

    fn entropy_records(
        &self,
        set: &EmbeddingSet,
        short: Option<&ShortTermHead>,
        iteration: usize,
    ) -> Result<Vec<ScoreRecord>> {
        let probs = self.long_probabilities(set, short)?;
        let k_old = self.agent.long_head.class_ids.len();
        probs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let h = entropy_score(p)?;
                let mut best = 0;
                for (j, v) in p.iter().enumerate() {
                    if *v > p[best] {
                        best = j;
                    }
                }
                let novel = match short {
                    Some(s) if best >= k_old => Some(s.class_ids[best - k_old]),
                    _ => None,
                };
                Ok(ScoreRecord {
                    sample_id: set.id(i),
                    numerator: h,
                    denominator: None,
                    score: h,
                    predicted_novel_class: novel,
                    iteration,
                })
            })
            .collect()
    }

    fn records(
        &self,
        set: &EmbeddingSet,
        numerators: &[f64],
        registry: &SubspaceRegistry,
        short: Option<&ShortTermHead>,
        iteration: usize,
    ) -> Result<Vec<ScoreRecord>> {
        match (self.cfg.policy.score, short) {
            (ScoreKind::Fre, None) => Ok(set
                .ids()
                .iter()
                .zip(numerators)
                .map(|(id, n)| ScoreRecord {
                    sample_id: *id,
                    numerator: *n,
                    denominator: None,
                    score: *n,
                    predicted_novel_class: None,
                    iteration,
                })
                .collect()),
            (ScoreKind::Fre, Some(head)) => {
                score_iter_cached(numerators, registry, head, set, iteration, self.cfg.eps_den)
            }
            (ScoreKind::Entropy, short) => self.entropy_records(set, short, iteration),
        }
    }
}

fn labeled_subset(
    pool: &EmbeddingSet,
    positions: &HashMap<SampleId, usize>,
    labels: &BTreeMap<SampleId, ClassId>,
) -> Result<EmbeddingSet> {
    let rows: Vec<usize> = labels.keys().map(|id| positions[id]).collect();
    let sub = pool.subset(&rows);
    sub.relabeled(labels.values().copied().collect())
}

/// Runs the inner loop on one task's pool and consolidates the result into
/// `agent`.
pub fn run_task(
    agent: &mut Agent,
    task_index: usize,
    pool: &EmbeddingSet,
    oracle: &mut dyn LabelOracle,
    cfg: &LoopConfig,
) -> Result<TaskOutcome> {
    cfg.validate()?;
    if agent.registry.old().is_empty() {
        return Err(Error::EmptyRegistry);
    }
    if pool.is_empty() {
        return Err(Error::InvalidSet("empty task pool".into()));
    }
    let pool = pool.unlabeled();
    let positions = pool.positions();
    let old_classes: BTreeSet<ClassId> = agent.learned_classes().iter().copied().collect();
    let policy = cfg.policy;
    // one shot: query once, then at most one pseudo-labeling pass
    let max_iterations = match (policy.one_shot, policy.pseudo_label) {
        (false, _) => cfg.max_iterations,
        (true, true) => cfg.max_iterations.min(2),
        (true, false) => 1,
    };
    let mut rng = seed::derived_rng(cfg.seed, &format!("task{task_index}/query"));

    let budget_total = budget_for_pool(cfg.budget_fraction, pool.len());
    let schedule: Vec<usize> = if policy.one_shot {
        let mut s = vec![0; max_iterations];
        s[0] = budget_total;
        s
    } else {
        (0..max_iterations).map(|i| allocate_quota(budget_total, max_iterations, i)).collect()
    };

    let needs_fre = policy.score == ScoreKind::Fre;
    let numerators = if needs_fre { old_class_numerators(&agent.registry, &pool)? } else { Vec::new() };
    let val_numerators = if needs_fre {
        old_class_numerators(&agent.registry, &agent.validation)?
    } else {
        Vec::new()
    };
    let mut state = TaskState {
        task_index,
        budget_total,
        budget_used: 0,
        iteration: 0,
        al_store: BTreeMap::new(),
        pl_store: BTreeMap::new(),
        discovered: BTreeSet::new(),
        short_head: None,
        frozen_numerators: numerators,
    };
    let mut registry = agent.registry.clone();
    let mut trace = Vec::new();
    let dim = pool.dim();

    let mut query_oracle = |state: &mut TaskState, ids: &[SampleId]| -> Result<Vec<ClassId>> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let labels = oracle.label(ids)?;
        for (id, label) in ids.iter().zip(&labels) {
            if state.al_store.insert(*id, *label).is_some() || state.pl_store.contains_key(id) {
                return Err(Error::AlreadyLabeled(*id));
            }
            if !old_classes.contains(label) {
                state.discovered.insert(*label);
            }
        }
        state.budget_used += ids.len();
        Ok(labels)
    };

    // the threshold is fixed for the whole task: validation statistics of the
    // iteration-0 score
    let threshold = {
        let scorer = Scorer { agent, cfg };
        let val_records = scorer.records(&agent.validation, &val_numerators, &registry, None, 0)?;
        let val_scores: Vec<f64> = val_records.iter().map(|r| r.score).collect();
        compute_threshold(&val_scores, cfg.k_std)?
    };

    loop {
        let i = state.iteration;
        let scorer = Scorer { agent, cfg };
        let short = state.short_head.as_ref();
        let records = scorer.records(&pool, &state.frozen_numerators, &registry, short, i)?;
        let excluded = state.labeled();
        let above = records
            .iter()
            .filter(|r| r.score > threshold.value && !excluded.contains(&r.sample_id))
            .count();
        let mut row = IterationTrace {
            task: task_index,
            iteration: i,
            threshold: threshold.value,
            threshold_mean: threshold.source_mean,
            threshold_std: threshold.source_std,
            above_threshold: above,
            queried: Vec::new(),
            oracle_labels: Vec::new(),
            pseudo_labeled: Vec::new(),
            discovered: Vec::new(),
            budget_used: state.budget_used,
            budget_total,
            stop: None,
        };

        let remaining = budget_total - state.budget_used;
        let mut decision = check_stop(&records, &threshold, &excluded, i, max_iterations, remaining);
        // uniform querying does not depend on the scores, only on the budget
        if policy.query == QueryRule::Random && remaining > 0 && i < max_iterations {
            decision = LoopDecision::Continue { query: true };
        }
        let query_allowed = match decision {
            LoopDecision::Stop(reason) => {
                row.stop = Some(reason);
                trace.push(row);
                break;
            }
            LoopDecision::Continue { query } => query,
        };

        let discovered_before = state.discovered.clone();
        if i == 0 {
            let quota = state.quota(&schedule, 0);
            let queried = match policy.query {
                QueryRule::Random => uniform_query(pool.ids(), quota, &mut rng),
                _ => initial_query(&records, &threshold, quota, &mut rng),
            };
            row.oracle_labels = query_oracle(&mut state, &queried)?;
            row.queried = queried;
        } else {
            if policy.pseudo_label {
                let selected = match policy.score {
                    ScoreKind::Fre => pseudo_label_select(&records, &threshold, cfg.alpha, &excluded),
                    ScoreKind::Entropy => lowest_entropy_select(&records, cfg.alpha, &excluded),
                };
                for (id, class) in &selected {
                    state.pl_store.insert(*id, *class);
                    row.pseudo_labeled.push(*id);
                }
            }
            let quota = if query_allowed { state.quota(&schedule, i) } else { 0 };
            if quota > 0 {
                let mut excluded = state.labeled();
                if cfg.query_novel_only {
                    excluded.extend(records.iter().filter(|r| r.score <= threshold.value).map(|r| r.sample_id));
                }
                let queried = match policy.query {
                    QueryRule::Ambiguity => ambiguous_query(&records, &threshold, quota, &excluded, cfg.eps_amb),
                    QueryRule::Top => top_query(&records, quota, &excluded),
                    QueryRule::Random => {
                        let labeled = state.labeled();
                        let free: Vec<SampleId> =
                            pool.ids().iter().filter(|id| !labeled.contains(id)).copied().collect();
                        uniform_query(&free, quota, &mut rng)
                    }
                };
                row.oracle_labels = query_oracle(&mut state, &queried)?;
                row.queried = queried;
            }
        }
        row.discovered = state.discovered.difference(&discovered_before).copied().collect();
        row.budget_used = state.budget_used;

        if state.discovered.is_empty() {
            row.stop = Some(StopReason::NoNovelClasses);
            trace.push(row);
            break;
        }
        trace.push(row);

        // refit novel subspaces and the short-term head on everything novel so far
        let novel = novel_labels(&state);
        let novel_set = labeled_subset(&pool, &positions, &novel)?;
        let mut subspaces = Vec::new();
        for (class, rows) in novel_set.indices_by_class() {
            subspaces.push(fit_rows(&novel_set, &rows, class, cfg.variance_retained)?);
        }
        registry.replace_new(subspaces)?;
        let classes: Vec<ClassId> = state.discovered.iter().copied().collect();
        let mut head = match state.short_head.take() {
            Some(h) if h.class_ids == classes => h,
            _ => init_short_head(&classes, dim, seed::derive(cfg.seed, &format!("task{task_index}/short/{i}")))?,
        };
        fit_head(
            &mut head,
            &novel_set,
            &vec![1.0; novel_set.len()],
            &cfg.short.with_seed(seed::derive(cfg.seed, &format!("task{task_index}/short-train/{i}"))),
        )?;
        state.short_head = Some(head);
        state.iteration += 1;
    }

    let updated = !state.discovered.is_empty();
    if updated {
        consolidate(agent, &pool, &positions, &state, cfg)?;
    }
    Ok(TaskOutcome {
        task_index,
        budget_total,
        labels_spent: state.budget_used,
        discovered: state.discovered.iter().copied().collect(),
        active_labels: state.al_store,
        pseudo_labels: state.pl_store,
        updated,
        trace,
    })
}

/// Oracle labels of novel classes plus every pseudo-label.
fn novel_labels(state: &TaskState) -> BTreeMap<SampleId, ClassId> {
    state
        .al_store
        .iter()
        .filter(|(_, c)| state.discovered.contains(c))
        .chain(state.pl_store.iter())
        .map(|(id, c)| (*id, *c))
        .collect()
}

/// End of task: validation holdout, final subspaces, long-head replay update,
/// buffer insert, promotion of the discovered classes.
fn consolidate(
    agent: &mut Agent,
    pool: &EmbeddingSet,
    positions: &HashMap<SampleId, usize>,
    state: &TaskState,
    cfg: &LoopConfig,
) -> Result<()> {
    let t = state.task_index;
    let mut rng = seed::derived_rng(cfg.seed, &format!("task{t}/holdout"));
    let novel = novel_labels(state);
    let mut per_class: BTreeMap<ClassId, (Vec<SampleId>, Vec<SampleId>)> = BTreeMap::new();
    for (id, class) in &novel {
        let entry = per_class.entry(*class).or_default();
        if state.pl_store.contains_key(id) {
            entry.0.push(*id);
        } else {
            entry.1.push(*id);
        }
    }
    // hold out pseudo-labeled samples first, oracle-labeled ones only if needed
    let mut holdout = BTreeMap::new();
    for (class, (mut pseudo, mut active)) in per_class {
        let h = holdout_count(pseudo.len() + active.len(), cfg.validation_rate, cfg.validation_min_per_class);
        pseudo.shuffle(&mut rng);
        active.shuffle(&mut rng);
        for id in pseudo.into_iter().chain(active).take(h) {
            holdout.insert(id, class);
        }
    }

    let keep = |labels: &BTreeMap<SampleId, ClassId>| -> BTreeMap<SampleId, ClassId> {
        labels
            .iter()
            .filter(|(id, _)| !holdout.contains_key(id))
            .map(|(id, c)| (*id, *c))
            .collect()
    };
    let al = labeled_subset(pool, positions, &keep(&state.al_store))?;
    let pl = labeled_subset(pool, positions, &keep(&state.pl_store))?;
    let final_novel = labeled_subset(pool, positions, &keep(&novel))?;

    let mut subspaces = Vec::new();
    for (class, rows) in final_novel.indices_by_class() {
        subspaces.push(fit_rows(&final_novel, &rows, class, cfg.variance_retained)?);
    }
    agent.registry.replace_new(subspaces)?;
    agent.registry.promote_new();

    let classes: Vec<ClassId> = state.discovered.iter().copied().collect();
    let expanded = expand_long_head(&agent.long_head, &classes, seed::derive(cfg.seed, &format!("task{t}/expand")))?;
    agent.long_head = replay_update(
        &expanded,
        &agent.buffer,
        &al,
        &pl,
        &cfg.loss_weights,
        &cfg.long.with_seed(seed::derive(cfg.seed, &format!("task{t}/replay"))),
    )?;
    agent.buffer.insert_balanced(&al, Provenance::Active)?;
    agent.buffer.insert_balanced(&pl, Provenance::Pseudo)?;
    let held = labeled_subset(pool, positions, &holdout)?;
    agent.validation = EmbeddingSet::concat(pool.dim(), &[&agent.validation, &held])?;
    Ok(())
}
