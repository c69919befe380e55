mod common;

use std::collections::{BTreeMap, HashSet};

use cual::benchmark::{
    build_stream, cumulative_accuracy, micro_accuracy, run_experiment, ExperimentConfig, Stream, StreamSpec, Strategy,
};
use cual::embedding::EmbeddingSet;
use cual::heads::{init_short_head, predict_set, ShortTermHead};
use cual::inner_loop::Agent;
use cual::{ClassId, Error, SampleId};
use nalgebra::{DMatrix, DVector};

fn twelve_class_stream() -> (EmbeddingSet, Stream) {
    let data = common::low_rank(12, 32, 300, 3);
    let spec = StreamSpec {
        holdout_fraction: 0.5,
        ..StreamSpec::default()
    };
    let stream = build_stream(&data, &spec).unwrap();
    (data, stream)
}

fn ids(set: &EmbeddingSet) -> HashSet<SampleId> {
    set.ids().iter().copied().collect()
}

#[test]
fn stream_layout_audit() {
    let (data, stream) = twelve_class_stream();
    assert_eq!(stream.tasks.len(), 4);

    let eval = ids(&stream.eval);
    let pretrain = ids(&stream.pretrain);
    assert!(eval.is_disjoint(&pretrain));
    for (c, rows) in stream.eval.indices_by_class() {
        assert_eq!(rows.len(), 60, "eval share of class {c}");
    }
    let pre_classes: Vec<ClassId> = stream.pretrain.indices_by_class().into_keys().collect();
    assert_eq!(pre_classes, (0..4).map(ClassId).collect::<Vec<_>>());

    let mut used = pretrain.clone();
    let mut seen: HashSet<ClassId> = pre_classes.iter().copied().collect();
    for (t, task) in stream.tasks.iter().enumerate() {
        let expected: Vec<ClassId> = vec![ClassId(4 + 2 * t as u32), ClassId(5 + 2 * t as u32)];
        assert_eq!(task.novel_classes, expected);
        assert_eq!(task.old_count, 2 * task.new_count, "task {t} is not 2:1");
        assert_eq!(task.pool.len(), task.old_count + task.new_count);

        let pool = ids(&task.pool);
        assert_eq!(pool.len(), task.pool.len());
        assert!(pool.is_disjoint(&eval), "task {t} pool overlaps eval");
        assert!(pool.is_disjoint(&used), "task {t} pool reuses samples");
        used.extend(pool);

        let mut new = 0;
        for i in 0..task.pool.len() {
            let c = task.pool.label(i).unwrap();
            if task.novel_classes.contains(&c) {
                new += 1;
            } else {
                assert!(seen.contains(&c), "class {c} in task {t} before it was introduced");
            }
        }
        assert_eq!(new, task.new_count);
        seen.extend(task.novel_classes.iter().copied());
    }
    assert!(used.len() + eval.len() <= data.len());
}

#[test]
fn stream_is_deterministic_and_seed_sensitive() {
    let data = common::low_rank(12, 32, 300, 3);
    let spec = StreamSpec {
        holdout_fraction: 0.5,
        ..StreamSpec::default()
    };
    let a = build_stream(&data, &spec).unwrap();
    let b = build_stream(&data, &spec).unwrap();
    let c = build_stream(&data, &StreamSpec { seed: 1, ..spec }).unwrap();
    for t in 0..4 {
        assert_eq!(a.tasks[t].pool.ids(), b.tasks[t].pool.ids());
    }
    assert_ne!(a.tasks[0].pool.ids(), c.tasks[0].pool.ids());
}

#[test]
fn default_holdout_share_is_insufficient_for_a_small_dataset() {
    let data = common::low_rank(12, 32, 300, 3);
    match build_stream(&data, &StreamSpec::default()) {
        Err(Error::InsufficientHoldout { task, achievable, .. }) => {
            assert_eq!(task, 1);
            assert!(achievable < 2.0);
        }
        other => panic!("expected InsufficientHoldout, got {other:?}"),
    }
}

/// Points at 10·e_c; a head with identity weights classifies them perfectly.
fn axis_data(k: usize, per_class: usize) -> EmbeddingSet {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for c in 0..k {
        for j in 0..per_class {
            let mut row = vec![0.01 * j as f32; k];
            row[c] = 10.0;
            features.extend(row);
            labels.push(ClassId(c as u32));
        }
    }
    EmbeddingSet::new(k, features, Some(labels)).unwrap()
}

fn head_with(k: usize, weights: DMatrix<f64>, bias: DVector<f64>) -> ShortTermHead {
    let class_ids: Vec<ClassId> = (0..k as u32).map(ClassId).collect();
    let mut head = init_short_head(&class_ids, k, 0).unwrap();
    head.weights = weights;
    head.bias = bias;
    head
}

#[test]
fn accuracy_of_perfect_and_constant_heads() {
    let k = 5;
    let eval = axis_data(k, 7);
    let classes: Vec<ClassId> = (0..k as u32).map(ClassId).collect();
    let perfect = head_with(k, DMatrix::identity(k, k), DVector::zeros(k));
    assert_eq!(cumulative_accuracy(&perfect, &eval, &classes).unwrap(), 1.0);
    assert_eq!(micro_accuracy(&perfect, &eval, &classes).unwrap(), 1.0);

    let mut bias = DVector::zeros(k);
    bias[2] = 1.0;
    let constant = head_with(k, DMatrix::zeros(k, k), bias);
    let acc = cumulative_accuracy(&constant, &eval, &classes).unwrap();
    assert!((acc - 1.0 / k as f64).abs() < 1e-12);

    assert!(matches!(cumulative_accuracy(&perfect, &eval, &[]), Err(Error::NoClasses)));
    assert!(matches!(
        cumulative_accuracy(&perfect, &eval, &[ClassId(0), ClassId(99)]),
        Err(Error::MissingEvalSet(ClassId(99)))
    ));
}

#[test]
fn accuracy_matches_a_hand_tally() {
    let data = common::low_rank(6, 16, 40, 9);
    let classes: Vec<ClassId> = (0..6).map(ClassId).collect();
    let head = init_short_head(&classes, 16, 4).unwrap();
    // restrict to a subset of classes, some of which are unbalanced
    let keep: Vec<usize> = (0..data.len()).filter(|i| i % 3 != 0 || data.label(*i).unwrap().0 < 3).collect();
    let eval = data.subset(&keep);
    let asked = [ClassId(1), ClassId(3), ClassId(4)];

    let preds = predict_set(&head, &eval).unwrap();
    let mut hits: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        let truth = eval.label(i).unwrap();
        if asked.contains(&truth) {
            let e = hits.entry(truth).or_default();
            e.1 += 1;
            if p.class_id == truth {
                e.0 += 1;
            }
        }
    }
    let macro_acc = hits.values().map(|(c, n)| *c as f64 / *n as f64).sum::<f64>() / 3.0;
    let micro_acc = hits.values().map(|h| h.0).sum::<usize>() as f64 / hits.values().map(|h| h.1).sum::<usize>() as f64;
    assert!((cumulative_accuracy(&head, &eval, &asked).unwrap() - macro_acc).abs() < 1e-12);
    assert!((micro_accuracy(&head, &eval, &asked).unwrap() - micro_acc).abs() < 1e-12);
}

fn small_stream() -> Stream {
    let data = common::low_rank(8, 16, 120, 2);
    let spec = StreamSpec {
        num_tasks: 2,
        holdout_fraction: 0.5,
        budget_fraction: 0.05,
        ..StreamSpec::default()
    };
    build_stream(&data, &spec).unwrap()
}

fn small_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        hidden: 64,
        ..ExperimentConfig::default()
    };
    cfg.loop_cfg.long.epochs = 10;
    cfg
}

#[test]
fn zero_budget_entropy_replay_keeps_the_pretrained_head() {
    let stream = small_stream();
    let cfg = small_cfg();
    let result = run_experiment(&stream, Strategy::ErEnt, &cfg, 0.0).unwrap();
    let mut loop_cfg = cfg.loop_cfg.clone();
    loop_cfg.policy = Strategy::ErEnt.policy();
    let pretrained = Agent::pretrain(&stream.pretrain, cfg.hidden, cfg.buffer_capacity, &loop_cfg).unwrap();
    assert_eq!(result.agent.long_head, pretrained.long_head);
    assert_eq!(result.metrics.oracle_calls, 0);
    for t in &result.metrics.tasks {
        assert_eq!(t.labels_used, 0);
        assert_eq!(t.budget_total, 0);
        assert_eq!(t.learned_classes, 4);
    }
}

#[test]
fn oracle_calls_and_class_coverage_add_up() {
    let stream = small_stream();
    let cfg = small_cfg();
    for strategy in [Strategy::Cual, Strategy::CualOnlyAl, Strategy::ErRand] {
        let r = run_experiment(&stream, strategy, &cfg, 0.05).unwrap();
        let spent: usize = r.metrics.tasks.iter().map(|t| t.labels_used).sum();
        assert_eq!(r.metrics.oracle_calls, spent, "{strategy}");
        let mut prev = 4;
        for (t, m) in r.metrics.tasks.iter().enumerate() {
            assert!(m.labels_used <= m.budget_total);
            assert!(m.learned_classes >= prev, "{strategy} forgot classes at task {}", t + 1);
            assert!(m.learned_classes <= stream.classes_through(t + 1).len());
            assert!((0.0..=1.0).contains(&m.cumulative_accuracy));
            prev = m.learned_classes;
        }
        let mut learned = r.agent.learned_classes().to_vec();
        learned.dedup();
        assert_eq!(learned.len(), r.agent.learned_classes().len());
    }
}

#[test]
fn strategy_names_round_trip() {
    for s in Strategy::ALL {
        assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        assert_eq!(s.to_string(), s.name());
    }
    assert!("nonsense".parse::<Strategy>().is_err());
}
