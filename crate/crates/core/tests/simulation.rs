mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fogal::acquisition::Strategy;
use fogal::bayes::{build_lenet, TrainConfig};
use fogal::config::{Aggregation, ExperimentConfig};
use fogal::dataset::{histogram, Dataset};
use fogal::edge::{
    al_step, partition, run_cascade, run_device, run_experiment_shared, sample_pool, DeviceParams, DeviceState,
    Evaluator, ExperimentData, SimContext,
};
use fogal::federation::run_round;
use fogal::metrics::emit_results;

fn params(strategy: Strategy, k: usize, pool: usize, epochs: usize) -> DeviceParams {
    DeviceParams {
        strategy,
        pool_size: pool,
        acquire_k: k,
        mc_samples: 2,
        train: TrainConfig {
            epochs,
            lr: 0.1,
            batch_size: 10,
        },
    }
}

fn device(data: &Dataset, initial: &[usize], shard: Vec<usize>, seed: u64) -> DeviceState {
    DeviceState::new(0, data, initial, shard, build_lenet(0.25, 0.5, seed).unwrap(), seed).unwrap()
}

fn context(data: &Arc<Dataset>, test: &Arc<Dataset>, p: DeviceParams, acquisitions: usize) -> SimContext {
    SimContext {
        train: Arc::clone(data),
        evaluator: Evaluator::new(Arc::clone(test), 2, 0),
        params: p,
        acquisitions,
        curve_every: 1,
        snapshots: vec![acquisitions],
        seed: 0,
    }
}

#[test]
fn shards_cover_every_class_over_many_seeds() {
    let data = common::synthetic(2000, 1);
    let all: Vec<usize> = (0..2000).collect();
    for seed in 0..100 {
        let plan = partition(data.labels(), &all, 4, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut seen = BTreeSet::new();
        for shard in &plan.shards {
            assert!(histogram(shard.iter().map(|&i| data.labels()[i]))
                .iter()
                .all(|&c| c > 0));
            for &i in shard {
                assert!(seen.insert(i), "index {i} in two shards");
            }
        }
        assert_eq!(seen.len(), 2000);
        assert!((plan.proportions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn pool_sampling() {
    let data = common::synthetic(400, 2);
    let mut d = device(&data, &[0, 1], (200..400).collect(), 3);
    assert_eq!(sample_pool(&mut d, 200), d.unlabeled);

    let mut a = device(&data, &[0, 1], (2..400).collect(), 3);
    let mut b = device(&data, &[0, 1], (2..400).collect(), 3);
    assert_eq!(sample_pool(&mut a, 50), sample_pool(&mut b, 50));

    let labeled: BTreeSet<usize> = [0, 1].into();
    for _ in 0..1000 {
        let pool = sample_pool(&mut a, 50);
        assert_eq!(pool.iter().collect::<BTreeSet<_>>().len(), 50);
        assert!(pool.iter().all(|i| !labeled.contains(i)));
    }
}

#[test]
fn labeled_and_unlabeled_stay_disjoint_over_1000_steps() {
    let data = common::synthetic(1300, 4);
    let initial: Vec<usize> = (0..10).collect();
    let shard: Vec<usize> = (10..1300).collect();
    let universe: BTreeSet<usize> = (0..1300).collect();
    let mut d = device(&data, &initial, shard, 5);
    let mut acquired = BTreeSet::new();
    for step in 0..1000 {
        let strategy = if step % 10 == 0 {
            Strategy::Entropy
        } else {
            Strategy::Random
        };
        let rec = al_step(&mut d, &data, &params(strategy, 1, 5, 0)).unwrap();
        for &i in &rec.acquired {
            assert!(acquired.insert(i), "index {i} acquired twice");
        }
        let labeled: BTreeSet<usize> = d.labeled.provenance().iter().copied().collect();
        let unlabeled: BTreeSet<usize> = d.unlabeled.iter().copied().collect();
        assert!(labeled.is_disjoint(&unlabeled));
        assert_eq!(labeled.union(&unlabeled).copied().collect::<BTreeSet<_>>(), universe);
        assert_eq!(d.labeled.len(), 10 + step + 1);
    }
}

#[test]
fn entropy_step_takes_the_top_scores() {
    let data = common::synthetic(600, 6);
    let mut d = device(&data, &(0..20).collect::<Vec<_>>(), (20..600).collect(), 7);
    let before = d.labeled.len();
    let rec = al_step(&mut d, &data, &params(Strategy::Entropy, 10, 200, 1)).unwrap();
    assert_eq!(d.labeled.len(), before + 10);
    let scores = rec.scores.unwrap();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].value.partial_cmp(&scores[a].value).unwrap().then(a.cmp(&b)));
    let expected: Vec<usize> = order[..10].iter().map(|&i| rec.pool[i]).collect();
    assert_eq!(rec.acquired, expected);
}

#[test]
fn random_step_ignores_a_deterministic_model() {
    let data = common::synthetic(300, 8);
    let mut d = DeviceState::new(0, &data, &[0], (1..300).collect(), build_lenet(0.0, 0.0, 1).unwrap(), 1).unwrap();
    let rec = al_step(&mut d, &data, &params(Strategy::Random, 10, 200, 1)).unwrap();
    assert!(rec.scores.is_none());
    assert_eq!(d.labeled.len(), 11);
}

#[test]
fn device_curve_lengths_and_counts() {
    let data = Arc::new(common::synthetic(600, 9));
    let test = Arc::new(common::synthetic(50, 10));
    let initial: Vec<usize> = (0..20).collect();

    let ctx0 = context(&data, &test, params(Strategy::Entropy, 10, 50, 1), 0);
    let run = run_device(device(&data, &initial, (20..600).collect(), 1), &ctx0).unwrap();
    assert_eq!(run.curve.points.len(), 1);

    let ctx = context(&data, &test, params(Strategy::Entropy, 10, 50, 1), 10);
    let run = run_device(device(&data, &initial, (20..600).collect(), 1), &ctx).unwrap();
    let counts: Vec<usize> = run.curve.points.iter().map(|p| p.labeled_count).collect();
    assert_eq!(counts, (0..=10).map(|i| 20 + 10 * i).collect::<Vec<_>>());
    assert!(run.curve.points.iter().all(|p| (0.0..=1.0).contains(&p.test_accuracy)));
}

#[test]
fn cascade_handoff() {
    let data = Arc::new(common::synthetic(600, 11));
    let test = Arc::new(common::synthetic(50, 12));
    let ctx = context(&data, &test, params(Strategy::Entropy, 5, 30, 1), 3);
    let start = build_lenet(0.25, 0.5, 3).unwrap();
    let make = |id: usize, range: std::ops::Range<usize>| {
        DeviceState::new(id, &data, &[0, 1], range.collect(), start.clone(), 100 + id as u64).unwrap()
    };

    let solo = run_cascade(vec![make(0, 2..300)], &start, &ctx).unwrap();
    let direct = run_device(make(0, 2..300), &ctx).unwrap();
    assert_eq!(solo[0].state.model, direct.state.model);
    assert_eq!(solo[0].curve, direct.curve);

    let chain = run_cascade(vec![make(0, 2..300), make(1, 300..600)], &start, &ctx).unwrap();
    assert_eq!(chain[0].state.model, direct.state.model);
    let first_final = chain[0].curve.last().unwrap().test_accuracy;
    assert_eq!(chain[1].curve.points[0].test_accuracy, first_final);
    let other = run_device(
        DeviceState::new(1, &data, &[0, 1], (300..600).collect(), direct.state.model.clone(), 101).unwrap(),
        &ctx,
    )
    .unwrap();
    assert_eq!(chain[1].state.model, other.state.model);
}

fn prepared(cfg: &ExperimentConfig) -> (ExperimentData, SimContext) {
    let train = Arc::new(common::synthetic(800, 13));
    let test = common::synthetic(100, 14);
    let data = ExperimentData::prepare(train, &test, cfg, cfg.seed).unwrap();
    let ctx = SimContext {
        train: Arc::clone(&data.train),
        evaluator: Evaluator::new(Arc::clone(&data.test), cfg.mc_samples, cfg.seed),
        params: DeviceParams::from(cfg),
        acquisitions: cfg.acquisitions,
        curve_every: cfg.curve_every,
        snapshots: cfg.aggregation_points(),
        seed: cfg.seed,
    };
    (data, ctx)
}

fn devices(cfg: &ExperimentConfig, data: &ExperimentData) -> Vec<DeviceState> {
    let model = build_lenet(0.25, 0.5, 0).unwrap();
    data.plan
        .shards
        .iter()
        .enumerate()
        .map(|(i, s)| DeviceState::new(i, &data.train, &data.fog_init, s.clone(), model.clone(), i as u64).unwrap())
        .collect::<Vec<_>>()
        .into_iter()
        .take(cfg.n_devices)
        .collect()
}

#[test]
fn one_device_average_passes_its_model_through() {
    let cfg = ExperimentConfig {
        n_devices: 1,
        ..common::tiny_config()
    };
    let (data, ctx) = prepared(&cfg);
    let fog = build_lenet(0.25, 0.5, 0).unwrap();
    let out = run_round(&fog, devices(&cfg, &data), &cfg, &ctx, &data.validation, 1).unwrap();
    assert_eq!(out.model.net, out.devices[0].model.net);
    assert_eq!(out.model.round, fog.round + 1);
}

#[test]
fn four_device_round_report() {
    let cfg = ExperimentConfig {
        n_devices: 4,
        ..common::tiny_config()
    };
    let (data, ctx) = prepared(&cfg);
    let fog = build_lenet(0.25, 0.5, 0).unwrap();
    let out = run_round(&fog, devices(&cfg, &data), &cfg, &ctx, &data.validation, 1).unwrap();
    let report = out.reports.last().unwrap();
    assert_eq!(report.device_accuracies.len(), 4);
    assert_eq!(report.contributing, vec![0, 1, 2, 3]);
    assert!((0.0..=1.0).contains(&report.fog_accuracy));
    let worst = report.validation_accuracies.iter().cloned().fold(1.0, f64::min);
    assert!(
        report.validation_accuracies[report.contributing.iter().position(|&d| d == report.selected).unwrap()] >= worst
    );

    let again = run_round(&fog, devices(&cfg, &data), &cfg, &ctx, &data.validation, 1).unwrap();
    let timeless = |reports: &[fogal::federation::RoundReport]| {
        reports
            .iter()
            .map(|r| fogal::federation::RoundReport {
                group_seconds: Vec::new(),
                ..r.clone()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(timeless(&again.reports), timeless(&out.reports));
}

#[test]
fn partial_returns_are_tolerated() {
    let cfg = ExperimentConfig {
        n_devices: 4,
        dropped_devices: vec![2],
        ..common::tiny_config()
    };
    let (data, ctx) = prepared(&cfg);
    let fog = build_lenet(0.25, 0.5, 0).unwrap();
    let out = run_round(&fog, devices(&cfg, &data), &cfg, &ctx, &data.validation, 1).unwrap();
    assert_eq!(out.reports[0].contributing, vec![0, 1, 3]);

    let all_gone = ExperimentConfig {
        dropped_devices: vec![0, 1, 2, 3],
        ..cfg
    };
    let err = run_round(&fog, devices(&all_gone, &data), &all_gone, &ctx, &data.validation, 1).unwrap_err();
    assert!(err.to_string().contains("no device returned"));
}

#[test]
fn worker_count_does_not_change_results() {
    let train = Arc::new(common::synthetic(800, 15));
    let test = common::synthetic(100, 16);
    let plain = run_experiment_shared(&common::tiny_config(), Arc::clone(&train), &test, 3).unwrap();
    let cfg = ExperimentConfig {
        cascade: 1,
        workers: 1,
        ..common::tiny_config()
    };
    let single = run_experiment_shared(&cfg, train, &test, 3).unwrap();
    assert_eq!(
        serde_json::to_string(&plain.curves).unwrap(),
        serde_json::to_string(&single.curves).unwrap()
    );
}

#[test]
fn reruns_are_bit_identical() {
    let train = Arc::new(common::synthetic(800, 17));
    let test = common::synthetic(100, 18);
    let cfg = ExperimentConfig {
        n_devices: 4,
        cascade: 2,
        aggregation: Aggregation::Optimal,
        matched_baseline: true,
        ..common::tiny_config()
    };
    let a = run_experiment_shared(&cfg, Arc::clone(&train), &test, 5).unwrap();
    let b = run_experiment_shared(&cfg, train, &test, 5).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let fa = emit_results(&cfg, &[a], &dir.path().join("a"), "run").unwrap();
    let fb = emit_results(&cfg, &[b], &dir.path().join("b"), "run").unwrap();
    assert_eq!(std::fs::read(&fa.csv).unwrap(), std::fs::read(&fb.csv).unwrap());
    assert_eq!(std::fs::read(&fa.summary).unwrap(), std::fs::read(&fb.summary).unwrap());
}

#[test]
fn csv_rows_for_a_default_shaped_run() {
    let train = Arc::new(common::synthetic(1200, 19));
    let test = common::synthetic(100, 20);
    let cfg = ExperimentConfig {
        n_devices: 4,
        acquisitions: 10,
        ..common::tiny_config()
    };
    let out = run_experiment_shared(&cfg, train, &test, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_results(&cfg, &[out], dir.path(), "run").unwrap();
    let text = std::fs::read_to_string(files.csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * 11 + 1);
    assert!(text.starts_with("entity,round,labeled_count,test_accuracy,strategy,seed\n"));

    let echoed = ExperimentConfig::from_file(&files.summary).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn repeats_produce_mean_and_std() {
    let train = Arc::new(common::synthetic(800, 21));
    let test = common::synthetic(100, 22);
    let cfg = ExperimentConfig {
        repeats: 5,
        ..common::tiny_config()
    };
    let runs = fogal::suite::run_repeats(&cfg, &train, &test).unwrap();
    assert_eq!(runs.len(), 5);
    let summary = fogal::metrics::Summary::new(&cfg, &runs);
    let fog = summary.curves.iter().find(|c| c.entity == "fog").unwrap();
    assert_eq!(fog.points[0].accuracy.n, 5);
}

#[test]
fn unwritable_output_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let err = emit_results(&ExperimentConfig::default(), &[], &blocker.join("sub"), "run");
    assert!(err.is_err());
}
