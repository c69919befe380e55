//! Continual task streams, the simulated annotator, and experiment runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::heads::{predict_set, Head, DEFAULT_HIDDEN};
use crate::inner_loop::{run_task, Agent, IterationTrace, LabelOracle, LoopConfig, LoopPolicy, QueryRule, ScoreKind};
use crate::replay::DEFAULT_CAPACITY;
use crate::{seed, ClassId, Error, Result, SampleId};

/// Layout of a continual stream over a labeled dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub classes_per_task: usize,
    pub num_tasks: usize,
    pub pretrain_classes: Vec<ClassId>,
    pub mix_old: usize,
    pub mix_new: usize,
    /// Share of each class reserved as the source of unseen old-class samples.
    pub holdout_fraction: f64,
    /// Share of each class carved off for evaluation before anything else.
    pub eval_fraction: f64,
    pub budget_fraction: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            classes_per_task: 2,
            num_tasks: 4,
            pretrain_classes: (0..4).map(ClassId).collect(),
            mix_old: 2,
            mix_new: 1,
            holdout_fraction: 0.0035,
            eval_fraction: 0.2,
            budget_fraction: 0.0125,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes_per_task == 0 {
            return Err(Error::config("classes_per_task", "must be at least 1"));
        }
        if self.pretrain_classes.is_empty() {
            return Err(Error::config("pretrain_classes", "must not be empty"));
        }
        if self.mix_old == 0 || self.mix_new == 0 {
            return Err(Error::config("mix_ratio", "both parts must be positive"));
        }
        for (key, v) in [("holdout_fraction", self.holdout_fraction), ("eval_fraction", self.eval_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(key, format!("{v} is outside (0, 1)")));
            }
        }
        if self.holdout_fraction + self.eval_fraction >= 1.0 {
            return Err(Error::config("holdout_fraction", "holdout and eval shares leave nothing for pools"));
        }
        if !(0.0..=1.0).contains(&self.budget_fraction) {
            return Err(Error::config("budget_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TaskData {
    /// Pool with ground-truth labels attached; the loop only sees it unlabeled.
    pub pool: EmbeddingSet,
    pub novel_classes: Vec<ClassId>,
    pub old_count: usize,
    pub new_count: usize,
}

#[derive(Clone, Debug)]
pub struct Stream {
    /// Fully labeled task-0 data.
    pub pretrain: EmbeddingSet,
    pub tasks: Vec<TaskData>,
    /// Evaluation samples of every class the stream touches.
    pub eval: EmbeddingSet,
}

impl Stream {
    /// Ground-truth classes introduced up to and including task `t`
    /// (task 0 is pretraining).
    pub fn classes_through(&self, t: usize) -> Vec<ClassId> {
        let mut classes: BTreeSet<ClassId> = self.pretrain.indices_by_class().into_keys().collect();
        for task in self.tasks.iter().take(t) {
            classes.extend(task.novel_classes.iter().copied());
        }
        classes.into_iter().collect()
    }
}

pub fn build_stream(dataset: &EmbeddingSet, spec: &StreamSpec) -> Result<Stream> {
    spec.validate()?;
    if dataset.labels().is_none() {
        return Err(Error::InvalidSet("stream construction needs a labeled dataset".into()));
    }
    let by_class = dataset.indices_by_class();
    let pretrain: BTreeSet<ClassId> = spec.pretrain_classes.iter().copied().collect();
    for c in &pretrain {
        if !by_class.contains_key(c) {
            return Err(Error::Stream(format!("pretrain class {c} is not in the dataset")));
        }
    }
    let novel_order: Vec<ClassId> = by_class.keys().filter(|c| !pretrain.contains(c)).copied().collect();
    let needed = spec.num_tasks * spec.classes_per_task;
    if needed > novel_order.len() {
        return Err(Error::Stream(format!(
            "{} tasks of {} classes need {needed} novel classes, dataset has {}",
            spec.num_tasks,
            spec.classes_per_task,
            novel_order.len()
        )));
    }

    let mut rng = seed::derived_rng(spec.seed, "stream");
    let mut eval_rows = Vec::new();
    let mut main: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    let mut holdout: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (class, rows) in &by_class {
        let mut rows = rows.clone();
        rows.shuffle(&mut rng);
        let n = rows.len();
        let n_eval = (spec.eval_fraction * n as f64).floor() as usize;
        let n_hold = (spec.holdout_fraction * n as f64).floor() as usize;
        eval_rows.extend_from_slice(&rows[..n_eval]);
        holdout.insert(*class, rows[n_eval..n_eval + n_hold].to_vec());
        main.insert(*class, rows[n_eval + n_hold..].to_vec());
    }

    let mut pretrain_rows: Vec<usize> = pretrain.iter().flat_map(|c| main[c].iter().copied()).collect();
    pretrain_rows.sort_unstable();
    let mut seen: Vec<ClassId> = pretrain.iter().copied().collect();
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        let novel = novel_order[t * spec.classes_per_task..(t + 1) * spec.classes_per_task].to_vec();
        let mut new_rows: Vec<usize> = novel.iter().flat_map(|c| main[c].iter().copied()).collect();
        new_rows.shuffle(&mut rng);
        new_rows.truncate(new_rows.len() / spec.mix_new * spec.mix_new);
        let n_old = new_rows.len() / spec.mix_new * spec.mix_old;

        let mut source: Vec<(ClassId, usize)> = seen
            .iter()
            .flat_map(|c| (0..holdout[c].len()).map(move |k| (*c, k)))
            .collect();
        if source.len() < n_old {
            return Err(Error::InsufficientHoldout {
                task: t + 1,
                needed: n_old,
                available: source.len(),
                achievable: source.len() as f64 / new_rows.len().max(1) as f64,
            });
        }
        source.shuffle(&mut rng);
        source.truncate(n_old);
        let mut taken: BTreeMap<ClassId, BTreeSet<usize>> = BTreeMap::new();
        for (c, k) in &source {
            taken.entry(*c).or_default().insert(*k);
        }
        let mut old_rows = Vec::with_capacity(n_old);
        for (c, ks) in taken {
            let rows = holdout.get_mut(&c).expect("seen class");
            old_rows.extend(ks.iter().map(|k| rows[*k]));
            let mut k = 0;
            rows.retain(|_| {
                k += 1;
                !ks.contains(&(k - 1))
            });
        }
        let mut rows: Vec<usize> = new_rows.iter().chain(&old_rows).copied().collect();
        rows.shuffle(&mut rng);
        tasks.push(TaskData {
            pool: dataset.subset(&rows),
            novel_classes: novel.clone(),
            old_count: old_rows.len(),
            new_count: new_rows.len(),
        });
        seen.extend(novel);
    }
    eval_rows.sort_unstable();
    Ok(Stream {
        pretrain: dataset.subset(&pretrain_rows),
        tasks,
        eval: dataset.subset(&eval_rows),
    })
}

/// Annotator backed by the hidden labels of the current pool.
#[derive(Clone, Debug, Default)]
pub struct SimulatedOracle {
    labels: HashMap<SampleId, ClassId>,
    calls: usize,
}

impl SimulatedOracle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes `pool`'s labels answerable; the call counter keeps running.
    pub fn set_pool(&mut self, pool: &EmbeddingSet) -> Result<()> {
        let labels = pool
            .labels()
            .ok_or_else(|| Error::InvalidSet("oracle pool has no labels".into()))?;
        self.labels = pool.ids().iter().copied().zip(labels.iter().copied()).collect();
        Ok(())
    }
}

impl LabelOracle for SimulatedOracle {
    fn label(&mut self, ids: &[SampleId]) -> Result<Vec<ClassId>> {
        let labels = ids
            .iter()
            .map(|id| self.labels.get(id).copied().ok_or(Error::UnknownSample(*id)))
            .collect::<Result<Vec<_>>>()?;
        self.calls += ids.len();
        Ok(labels)
    }

    fn calls(&self) -> usize {
        self.calls
    }
}

/// Per-class accuracy averaged over `classes`. A class the head does not
/// know scores 0.
pub fn cumulative_accuracy<H: Head>(head: &H, eval: &EmbeddingSet, classes: &[ClassId]) -> Result<f64> {
    let (correct, total) = tally(head, eval, classes)?;
    let per_class: Vec<f64> = classes.iter().map(|c| correct[c] as f64 / total[c] as f64).collect();
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Sample-level accuracy over the evaluation samples of `classes`.
pub fn micro_accuracy<H: Head>(head: &H, eval: &EmbeddingSet, classes: &[ClassId]) -> Result<f64> {
    let (correct, total) = tally(head, eval, classes)?;
    Ok(correct.values().sum::<usize>() as f64 / total.values().sum::<usize>() as f64)
}

type Counts = BTreeMap<ClassId, usize>;

fn tally<H: Head>(head: &H, eval: &EmbeddingSet, classes: &[ClassId]) -> Result<(Counts, Counts)> {
    if classes.is_empty() {
        return Err(Error::NoClasses);
    }
    let by_class = eval.indices_by_class();
    let mut rows = Vec::new();
    for c in classes {
        match by_class.get(c) {
            Some(r) if !r.is_empty() => rows.extend_from_slice(r),
            _ => return Err(Error::MissingEvalSet(*c)),
        }
    }
    rows.sort_unstable();
    let subset = eval.subset(&rows);
    let preds = predict_set(head, &subset)?;
    let mut correct: Counts = classes.iter().map(|c| (*c, 0)).collect();
    let mut total: Counts = classes.iter().map(|c| (*c, 0)).collect();
    for (i, p) in preds.iter().enumerate() {
        let truth = subset.label(i).expect("eval is labeled");
        *total.get_mut(&truth).expect("requested class") += 1;
        if p.class_id == truth {
            *correct.get_mut(&truth).expect("requested class") += 1;
        }
    }
    Ok((correct, total))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "CUAL")]
    Cual,
    #[serde(rename = "CUAL-AL-Top")]
    CualAlTop,
    #[serde(rename = "CUAL-AL-Rand")]
    CualAlRand,
    #[serde(rename = "CUAL-AL-oneshot")]
    CualAlOneshot,
    #[serde(rename = "CUAL-only-AL")]
    CualOnlyAl,
    #[serde(rename = "ER-Ent")]
    ErEnt,
    #[serde(rename = "ER-Rand")]
    ErRand,
    #[serde(rename = "ER-Ent-oneshot")]
    ErEntOneshot,
    #[serde(rename = "PseudoER-Ent")]
    PseudoErEnt,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Cual,
        Strategy::CualAlTop,
        Strategy::CualAlRand,
        Strategy::CualAlOneshot,
        Strategy::CualOnlyAl,
        Strategy::ErEnt,
        Strategy::ErRand,
        Strategy::ErEntOneshot,
        Strategy::PseudoErEnt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Cual => "CUAL",
            Strategy::CualAlTop => "CUAL-AL-Top",
            Strategy::CualAlRand => "CUAL-AL-Rand",
            Strategy::CualAlOneshot => "CUAL-AL-oneshot",
            Strategy::CualOnlyAl => "CUAL-only-AL",
            Strategy::ErEnt => "ER-Ent",
            Strategy::ErRand => "ER-Rand",
            Strategy::ErEntOneshot => "ER-Ent-oneshot",
            Strategy::PseudoErEnt => "PseudoER-Ent",
        }
    }

    pub fn policy(self) -> LoopPolicy {
        let p = |score, query, pseudo_label, one_shot| LoopPolicy {
            score,
            query,
            pseudo_label,
            one_shot,
        };
        use QueryRule::*;
        use ScoreKind::*;
        match self {
            Strategy::Cual => p(Fre, Ambiguity, true, false),
            Strategy::CualAlTop => p(Fre, Top, true, false),
            Strategy::CualAlRand => p(Fre, Random, true, false),
            Strategy::CualAlOneshot => p(Fre, Ambiguity, true, true),
            Strategy::CualOnlyAl => p(Fre, Ambiguity, false, false),
            Strategy::ErEnt => p(Entropy, Ambiguity, false, false),
            Strategy::ErRand => p(Entropy, Random, false, false),
            Strategy::ErEntOneshot => p(Entropy, Ambiguity, false, true),
            Strategy::PseudoErEnt => p(Entropy, Ambiguity, true, false),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Case-insensitive; the `CUAL-` prefix may be dropped for CUAL ablations.
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Strategy::ALL
            .into_iter()
            .find(|st| {
                let name = st.name().to_ascii_lowercase();
                name == key || name.strip_prefix("cual-") == Some(key.as_str())
            })
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy {s:?}")))
    }
}

/// Everything a run needs besides the data and the stream layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub loop_cfg: LoopConfig,
    pub hidden: usize,
    pub buffer_capacity: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            loop_cfg: LoopConfig::default(),
            hidden: DEFAULT_HIDDEN,
            buffer_capacity: DEFAULT_CAPACITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    /// 1-based; task 0 is pretraining.
    pub task: usize,
    pub cumulative_accuracy: f64,
    pub micro_accuracy: f64,
    pub labels_used: usize,
    pub budget_total: usize,
    pub pseudo_labels_used: usize,
    /// `None` when nothing was pseudo-labeled.
    pub pseudo_label_precision: Option<f64>,
    pub discovery_recall: f64,
    pub learned_classes: usize,
    pub wall_time_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pretrain_accuracy: f64,
    pub tasks: Vec<TaskMetrics>,
    /// Mean cumulative accuracy over tasks 1..=T.
    pub averaged_accuracy: f64,
    pub oracle_calls: usize,
}

impl Metrics {
    pub fn final_accuracy(&self) -> f64 {
        self.tasks.last().map_or(self.pretrain_accuracy, |t| t.cumulative_accuracy)
    }

    /// Discovered novel classes over all novel classes of the stream.
    pub fn overall_recall(&self, stream: &Stream) -> f64 {
        let total: usize = stream.tasks.iter().map(|t| t.novel_classes.len()).sum();
        let found: f64 = self
            .tasks
            .iter()
            .zip(&stream.tasks)
            .map(|(m, t)| m.discovery_recall * t.novel_classes.len() as f64)
            .sum();
        found / total as f64
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub strategy: Strategy,
    pub metrics: Metrics,
    pub trace: Vec<IterationTrace>,
    pub agent: Agent,
}

/// Pretrains on task 0, then runs every task of the stream under `strategy`.
/// The stream's budget fraction overrides the loop configuration's.
pub fn run_experiment(stream: &Stream, strategy: Strategy, cfg: &ExperimentConfig, budget_fraction: f64) -> Result<ExperimentResult> {
    let mut loop_cfg = cfg.loop_cfg.clone();
    loop_cfg.policy = strategy.policy();
    loop_cfg.budget_fraction = budget_fraction;
    loop_cfg.validate()?;
    let mut agent = Agent::pretrain(&stream.pretrain, cfg.hidden, cfg.buffer_capacity, &loop_cfg)?;
    let pretrain_accuracy = cumulative_accuracy(&agent.long_head, &stream.eval, &stream.classes_through(0))?;
    let mut oracle = SimulatedOracle::new();
    let mut trace = Vec::new();
    let mut tasks = Vec::with_capacity(stream.tasks.len());
    for (t, data) in stream.tasks.iter().enumerate() {
        let started = Instant::now();
        oracle.set_pool(&data.pool)?;
        let outcome = run_task(&mut agent, t + 1, &data.pool, &mut oracle, &loop_cfg)?;
        let wall_time_ms = started.elapsed().as_secs_f64() * 1e3;

        let truth: HashMap<SampleId, ClassId> = data
            .pool
            .ids()
            .iter()
            .copied()
            .zip(data.pool.labels().expect("pool labels").iter().copied())
            .collect();
        let correct = outcome.pseudo_labels.iter().filter(|(id, c)| truth[*id] == **c).count();
        let n_pl = outcome.pseudo_labels.len();
        let found = data.novel_classes.iter().filter(|c| outcome.discovered.contains(c)).count();
        let classes = stream.classes_through(t + 1);
        tasks.push(TaskMetrics {
            task: t + 1,
            cumulative_accuracy: cumulative_accuracy(&agent.long_head, &stream.eval, &classes)?,
            micro_accuracy: micro_accuracy(&agent.long_head, &stream.eval, &classes)?,
            labels_used: outcome.labels_spent,
            budget_total: outcome.budget_total,
            pseudo_labels_used: n_pl,
            pseudo_label_precision: (n_pl > 0).then(|| correct as f64 / n_pl as f64),
            discovery_recall: found as f64 / data.novel_classes.len() as f64,
            learned_classes: agent.learned_classes().len(),
            wall_time_ms,
        });
        trace.extend(outcome.trace);
    }
    let averaged_accuracy = if tasks.is_empty() {
        pretrain_accuracy
    } else {
        tasks.iter().map(|m| m.cumulative_accuracy).sum::<f64>() / tasks.len() as f64
    };
    Ok(ExperimentResult {
        strategy,
        metrics: Metrics {
            pretrain_accuracy,
            tasks,
            averaged_accuracy,
            oracle_calls: oracle.calls(),
        },
        trace,
        agent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{generate_synthetic, SyntheticSpec};

    fn dataset(k: usize, n: usize) -> EmbeddingSet {
        generate_synthetic(&SyntheticSpec::new(k, 16, n, 8.0, 3)).unwrap()
    }

    fn spec(tasks: usize, holdout: f64) -> StreamSpec {
        StreamSpec {
            num_tasks: tasks,
            holdout_fraction: holdout,
            ..StreamSpec::default()
        }
    }

    #[test]
    fn ratio_arithmetic() {
        // 2 novel classes x 50 main samples = 100 new, 200 old
        let data = dataset(6, 250);
        let s = StreamSpec {
            num_tasks: 1,
            holdout_fraction: 0.6,
            eval_fraction: 0.2,
            ..StreamSpec::default()
        };
        let stream = build_stream(&data, &s).unwrap();
        assert_eq!(stream.tasks[0].new_count, 100);
        assert_eq!(stream.tasks[0].old_count, 200);
        assert_eq!(stream.tasks[0].pool.len(), 300);
    }

    #[test]
    fn exhausting_classes() {
        let data = dataset(12, 50);
        assert!(build_stream(&data, &spec(4, 0.5)).is_ok());
        assert!(matches!(build_stream(&data, &spec(5, 0.5)), Err(Error::Stream(_))));
    }

    #[test]
    fn insufficient_holdout_reports_ratio() {
        let data = dataset(6, 300);
        match build_stream(&data, &spec(1, 0.01)) {
            Err(Error::InsufficientHoldout { needed, available, achievable, .. }) => {
                assert!(available < needed);
                assert!(achievable < 2.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn oracle_counts_labels() {
        let data = dataset(3, 4);
        let mut o = SimulatedOracle::new();
        o.set_pool(&data).unwrap();
        assert!(o.label(&[]).unwrap().is_empty());
        assert_eq!(o.calls(), 0);
        assert_eq!(o.label(&[data.id(5)]).unwrap(), vec![data.label(5).unwrap()]);
        assert_eq!(o.calls(), 1);
        assert!(matches!(o.label(&[SampleId(999)]), Err(Error::UnknownSample(_))));
    }

    #[test]
    fn strategy_names_parse() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(s.name().to_lowercase().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!("only-AL".parse::<Strategy>().unwrap(), Strategy::CualOnlyAl);
        assert_eq!("AL-Top".parse::<Strategy>().unwrap(), Strategy::CualAlTop);
        assert!("bogus".parse::<Strategy>().is_err());
    }
}
