//! Simulated edge devices: data partitioning, pool sampling, the per-device
//! active-learning loop, cascaded training chains and the end-to-end
//! experiment driver.
//!
//! Index sets (shards, pools, labeled provenance) are indices into the
//! shared training set.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::acquisition::{score_all, select_random, select_top_k, AcquisitionScore, Strategy};
use crate::bayes::{self, build_lenet_with, mc_predict, LabeledSet, ModelCheckpoint, TrainConfig};
use crate::config::ExperimentConfig;
use crate::dataset::{Dataset, Mnist, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::federation::{self, RoundReport};
use crate::metrics::LearningCurve;
use crate::rng::{derive_seed, rng_for, stream, SimRng};

const MAX_PARTITION_DRAWS: usize = 100;

/// Disjoint device shards and the proportions they were cut with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub shards: Vec<Vec<usize>>,
    pub proportions: Vec<f64>,
}

/// Random proportions `0.5/n + 0.5 * Dirichlet(1, ..., 1)`, so every entry
/// is at least `0.5/n` and they sum to one.
pub fn draw_proportions<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    let floor = 0.5 / n as f64;
    e.iter()
        .map(|&x| floor + 0.5 * if total > 0.0 { x / total } else { 1.0 / n as f64 })
        .collect()
}

/// Shard sizes for `total` items: floors of `p_i * total`, with the
/// remainder going to the largest fractional parts.
fn shard_sizes(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let assigned: usize = sizes.iter().sum();
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Shuffles `candidates` and cuts them into `n_devices` contiguous shards.
/// Shards are redrawn until each one holds every class present among the
/// candidates.
pub fn partition<R: Rng + ?Sized>(
    labels: &[usize],
    candidates: &[usize],
    n_devices: usize,
    proportions: Option<&[f64]>,
    rng: &mut R,
) -> Result<PartitionPlan> {
    if n_devices == 0 {
        return Err(Error::InvalidArgument("need at least one device".into()));
    }
    if let Some(p) = proportions {
        if p.len() != n_devices || p.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidArgument(
                "proportions need one positive entry per device".into(),
            ));
        }
    }
    if let Some(&bad) = candidates.iter().find(|&&i| i >= labels.len()) {
        return Err(Error::OutOfRange {
            what: "label list",
            index: bad,
            len: labels.len(),
        });
    }
    let present = crate::dataset::histogram(candidates.iter().map(|&i| labels[i]));
    let needed = present.iter().filter(|&&c| c > 0).count();
    let mut order = candidates.to_vec();
    for _ in 0..MAX_PARTITION_DRAWS {
        let props = match proportions {
            Some(p) => {
                let total: f64 = p.iter().sum();
                p.iter().map(|x| x / total).collect()
            }
            None => draw_proportions(n_devices, rng),
        };
        let sizes = shard_sizes(&props, order.len());
        if sizes.iter().any(|&s| s < needed) {
            return Err(Error::InvalidArgument(format!(
                "shard sizes {sizes:?} cannot hold all {needed} classes"
            )));
        }
        order.shuffle(rng);
        let mut shards = Vec::with_capacity(n_devices);
        let mut start = 0;
        for s in &sizes {
            shards.push(order[start..start + s].to_vec());
            start += s;
        }
        let complete = shards.iter().all(|shard| {
            let h = crate::dataset::histogram(shard.iter().map(|&i| labels[i]));
            h.iter().zip(&present).all(|(&got, &avail)| avail == 0 || got > 0)
        });
        if complete {
            return Ok(PartitionPlan {
                shards,
                proportions: props,
            });
        }
    }
    Err(Error::InvalidArgument(format!(
        "no partition with every class on every device after {MAX_PARTITION_DRAWS} draws"
    )))
}

/// `m` indices from `slice`, as even across classes as possible
/// (`m / 10` each, the remainder to the lowest classes), in slice order.
pub fn balanced_pick(labels: &[usize], slice: &[usize], m: usize) -> Result<Vec<usize>> {
    if slice.len() < m {
        return Err(Error::InvalidArgument(format!(
            "reserved slice of {} images cannot supply {m} initial images",
            slice.len()
        )));
    }
    let mut quota = [m / NUM_CLASSES; NUM_CLASSES];
    for q in quota.iter_mut().take(m % NUM_CLASSES) {
        *q += 1;
    }
    let mut taken = vec![false; slice.len()];
    let mut picked = Vec::with_capacity(m);
    for (pos, &i) in slice.iter().enumerate() {
        let c = labels[i];
        if quota[c] > 0 && picked.len() < m {
            quota[c] -= 1;
            taken[pos] = true;
            picked.push(i);
        }
    }
    // A class missing from the slice is made up with the earliest leftovers.
    if picked.len() < m {
        log::warn!("initial set is not class-balanced: slice lacks some classes");
        let fill: Vec<usize> = slice
            .iter()
            .zip(&taken)
            .filter(|(_, &t)| !t)
            .map(|(&i, _)| i)
            .take(m - picked.len())
            .collect();
        picked.extend(fill);
    }
    Ok(picked)
}

/// The data side of one seeded experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Arc<Dataset>,
    /// Reported test metric.
    pub test: Arc<Dataset>,
    /// Held-out images for optimal-model selection, disjoint from `test`.
    pub validation: Arc<Dataset>,
    /// Training indices of the fog node's initial images.
    pub fog_init: Vec<usize>,
    pub plan: PartitionPlan,
}

impl ExperimentData {
    pub fn prepare(train: Arc<Dataset>, test_source: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, &[stream::SPLIT]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let reserve = cfg.fog_reserve.max(3 * cfg.m_init).min(train.len());
        let fog_init = balanced_pick(train.labels(), &order[..reserve], cfg.m_init)?;
        let plan = partition(
            train.labels(),
            &order[reserve..],
            cfg.n_devices,
            cfg.proportions.as_deref(),
            &mut rng,
        )?;

        let mut test_order: Vec<usize> = (0..test_source.len()).collect();
        test_order.shuffle(&mut rng_for(seed, &[stream::VALIDATION]));
        if test_source.len() <= cfg.validation_size {
            return Err(Error::Config(format!(
                "test set of {} images leaves nothing after a validation slice of {}",
                test_source.len(),
                cfg.validation_size
            )));
        }
        let (val_idx, rest) = test_order.split_at(cfg.validation_size);
        if rest.len() < cfg.test_size {
            log::warn!("test size {} capped at {}", cfg.test_size, rest.len());
        }
        let test_idx = &rest[..cfg.test_size.min(rest.len())];
        Ok(Self {
            validation: Arc::new(test_source.subset(val_idx)?),
            test: Arc::new(test_source.subset(test_idx)?),
            train,
            fog_init,
            plan,
        })
    }
}

/// A simulated device. `unlabeled` is kept sorted.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub device_id: usize,
    pub labeled: LabeledSet,
    pub unlabeled: Vec<usize>,
    pub shard: Vec<usize>,
    pub model: ModelCheckpoint,
    pub rng_seed: u64,
    /// Acquisitions completed over the device's lifetime.
    pub acquisitions: usize,
    rng: SimRng,
}

impl DeviceState {
    /// A device that starts with the fog node's initial images labeled and
    /// its whole shard unlabeled.
    pub fn new(
        device_id: usize,
        train: &Dataset,
        initial: &[usize],
        shard: Vec<usize>,
        model: ModelCheckpoint,
        rng_seed: u64,
    ) -> Result<Self> {
        let mut unlabeled = shard.clone();
        unlabeled.sort_unstable();
        if unlabeled.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!(
                "device {device_id} shard has duplicates"
            )));
        }
        if let Some(&i) = initial.iter().find(|i| unlabeled.binary_search(i).is_ok()) {
            return Err(Error::InvalidArgument(format!(
                "initial image {i} is also in device {device_id}'s shard"
            )));
        }
        Ok(Self {
            device_id,
            labeled: LabeledSet::from_dataset(train, initial)?,
            unlabeled,
            shard,
            model,
            rng_seed,
            acquisitions: 0,
            rng: SimRng::seed_from_u64(rng_seed),
        })
    }

    pub fn rng(&mut self) -> &mut SimRng {
        &mut self.rng
    }
}

/// Per-device acquisition settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams {
    pub strategy: Strategy,
    pub pool_size: usize,
    pub acquire_k: usize,
    pub mc_samples: usize,
    pub train: TrainConfig,
}

impl From<&ExperimentConfig> for DeviceParams {
    fn from(cfg: &ExperimentConfig) -> Self {
        Self {
            strategy: cfg.strategy,
            pool_size: cfg.pool_size,
            acquire_k: cfg.acquire_k,
            mc_samples: cfg.mc_samples,
            train: cfg.train_config(),
        }
    }
}

/// `pool_size` distinct unlabeled indices, or the whole unlabeled set when
/// it is not larger than that.
pub fn sample_pool(device: &mut DeviceState, pool_size: usize) -> Vec<usize> {
    let n = device.unlabeled.len();
    if n <= pool_size {
        if n < pool_size {
            log::warn!(
                "device {}: only {n} unlabeled images left, pool of {pool_size} requested",
                device.device_id
            );
        }
        return device.unlabeled.clone();
    }
    rand::seq::index::sample(&mut device.rng, n, pool_size)
        .into_iter()
        .map(|i| device.unlabeled[i])
        .collect()
}

/// What one acquisition step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub pool: Vec<usize>,
    /// Scores of the pool, absent for random acquisition.
    pub scores: Option<Vec<AcquisitionScore>>,
    /// Acquired training indices, in selection order.
    pub acquired: Vec<usize>,
    pub epoch_losses: Vec<f64>,
}

/// Samples a pool, labels the `k` best (or random) images, and retrains on
/// the cumulative labeled set.
pub fn al_step(device: &mut DeviceState, train: &Dataset, params: &DeviceParams) -> Result<StepRecord> {
    if device.unlabeled.is_empty() {
        return Err(Error::Empty("unlabeled set"));
    }
    let pool = sample_pool(device, params.pool_size);
    let k = params.acquire_k.min(pool.len());
    let (chosen, scores) = if params.strategy.uses_model() {
        let images = train.images().gather(&pool)?;
        let preds = mc_predict(&device.model, &images, params.mc_samples, &mut device.rng)?;
        let scores = score_all(&preds, params.strategy)?;
        (select_top_k(&scores, k)?, Some(scores))
    } else {
        (select_random(pool.len(), k, &mut device.rng)?, None)
    };
    let acquired: Vec<usize> = chosen.iter().map(|&i| pool[i]).collect();
    let mut taken = acquired.clone();
    taken.sort_unstable();
    device.unlabeled.retain(|i| taken.binary_search(i).is_err());
    device.labeled.extend_from(train, &acquired)?;
    let outcome = bayes::train(&device.model, &device.labeled, &params.train, &mut device.rng)?;
    device.model = outcome.model;
    device.acquisitions += 1;
    Ok(StepRecord {
        pool,
        scores,
        acquired,
        epoch_losses: outcome.epoch_losses,
    })
}

/// Test-set accuracy with a fixed dropout stream, so every model is scored
/// under the same masks.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub test: Arc<Dataset>,
    pub samples: usize,
    pub seed: u64,
}

impl Evaluator {
    pub fn new(test: Arc<Dataset>, samples: usize, seed: u64) -> Self {
        Self { test, samples, seed }
    }

    pub fn accuracy(&self, model: &ModelCheckpoint) -> Result<f64> {
        let mut rng = rng_for(self.seed, &[stream::EVAL]);
        bayes::evaluate_dataset(model, &self.test, self.samples, &mut rng)
    }
}

/// Everything a device loop needs besides its own state.
#[derive(Debug, Clone)]
pub struct SimContext {
    pub train: Arc<Dataset>,
    pub evaluator: Evaluator,
    pub params: DeviceParams,
    /// Acquisitions per device per federated round.
    pub acquisitions: usize,
    pub curve_every: usize,
    /// Acquisition counts within the round at which to keep a model copy.
    pub snapshots: Vec<usize>,
    pub seed: u64,
}

/// A device model kept part-way through a round.
#[derive(Debug, Clone)]
pub struct Snapshot {
    /// Acquisitions within the round.
    pub acquisitions: usize,
    pub labeled_count: usize,
    pub model: ModelCheckpoint,
}

/// A finished device loop.
#[derive(Debug, Clone)]
pub struct DeviceRun {
    pub state: DeviceState,
    pub curve: LearningCurve,
    /// One per entry of the context's snapshot list, in the same order.
    pub snapshots: Vec<Snapshot>,
    pub seconds: f64,
}

/// Runs `ctx.acquisitions` acquisition steps. The curve holds the starting
/// point plus one point per evaluated step (every step by default).
pub fn run_device(mut state: DeviceState, ctx: &SimContext) -> Result<DeviceRun> {
    let started = Instant::now();
    let mut curve = LearningCurve::new(format!("device-{}", state.device_id), ctx.params.strategy, ctx.seed);
    curve.push(
        state.acquisitions,
        state.labeled.len(),
        ctx.evaluator.accuracy(&state.model)?,
    );
    let mut snapshots = Vec::new();
    let mut keep = |step: usize, state: &DeviceState| {
        if ctx.snapshots.contains(&step) {
            snapshots.push(Snapshot {
                acquisitions: step,
                labeled_count: state.labeled.len(),
                model: state.model.clone(),
            });
        }
    };
    keep(0, &state);
    for step in 1..=ctx.acquisitions {
        al_step(&mut state, &ctx.train, &ctx.params)?;
        if step % ctx.curve_every == 0 || step == ctx.acquisitions {
            curve.push(
                state.acquisitions,
                state.labeled.len(),
                ctx.evaluator.accuracy(&state.model)?,
            );
        }
        keep(step, &state);
    }
    Ok(DeviceRun {
        state,
        curve,
        snapshots,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// An ordered chain of neighbouring devices handing their model along.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeGroup {
    pub device_ids: Vec<usize>,
}

impl CascadeGroup {
    /// Consecutive chains of `size` devices.
    pub fn partition(n_devices: usize, size: usize) -> Result<Vec<CascadeGroup>> {
        if size == 0 || !n_devices.is_multiple_of(size) {
            return Err(Error::Config(format!(
                "cascade group size {size} does not divide device count {n_devices}"
            )));
        }
        Ok((0..n_devices / size)
            .map(|g| CascadeGroup {
                device_ids: (g * size..(g + 1) * size).collect(),
            })
            .collect())
    }

    pub fn tail(&self) -> usize {
        *self.device_ids.last().expect("cascade group is never empty")
    }
}

/// Runs the devices of a chain one after another, each starting from its
/// predecessor's final model; the first starts from `start`.
pub fn run_cascade(devices: Vec<DeviceState>, start: &ModelCheckpoint, ctx: &SimContext) -> Result<Vec<DeviceRun>> {
    let mut model = start.clone();
    let mut runs = Vec::with_capacity(devices.len());
    for mut device in devices {
        device.model = model;
        let run = run_device(device, ctx)?;
        model = run.state.model.clone();
        runs.push(run);
    }
    Ok(runs)
}

/// Accuracy of a model trained centrally on a given number of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    /// Acquisition count it is compared against, if matched to one.
    pub acquisitions: Option<usize>,
    pub images: usize,
    pub accuracy: f64,
}

/// Results of one seeded experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub seed: u64,
    pub proportions: Vec<f64>,
    pub fog_init_accuracy: f64,
    pub reports: Vec<RoundReport>,
    pub curves: Vec<LearningCurve>,
    pub baselines: Vec<BaselineResult>,
}

impl ExperimentOutcome {
    /// The report of the last federated round at its full acquisition count.
    pub fn final_report(&self) -> Option<&RoundReport> {
        self.reports.last()
    }

    pub fn report_at(&self, round: usize, acquisitions: usize) -> Option<&RoundReport> {
        self.reports
            .iter()
            .find(|r| r.round == round && r.acquisitions == acquisitions)
    }
}

/// Fog training, dispatch, device loops, aggregation and evaluation for
/// one seed.
pub fn run_experiment(cfg: &ExperimentConfig, mnist: &Mnist, seed: u64) -> Result<ExperimentOutcome> {
    run_experiment_shared(cfg, Arc::new(mnist.train.clone()), &mnist.test, seed)
}

/// As [`run_experiment`] but reusing an already shared training set.
pub fn run_experiment_shared(
    cfg: &ExperimentConfig,
    train: Arc<Dataset>,
    test_source: &Dataset,
    seed: u64,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = ExperimentData::prepare(train, test_source, cfg, seed)?;
    let evaluator = Evaluator::new(Arc::clone(&data.test), cfg.mc_samples, seed);

    let untrained = build_lenet_with(&cfg.lenet_options(), seed)?;
    let fog_set = LabeledSet::from_dataset(&data.train, &data.fog_init)?;
    let fog_model = if fog_set.is_empty() {
        untrained
    } else {
        let mut rng = rng_for(seed, &[stream::FOG_TRAIN]);
        bayes::train(&untrained, &fog_set, &cfg.train_config(), &mut rng)?.model
    };
    let fog_init_accuracy = evaluator.accuracy(&fog_model)?;
    log::info!("seed {seed}: initial fog model accuracy {fog_init_accuracy:.4}");

    let mut devices: Vec<DeviceState> = data
        .plan
        .shards
        .iter()
        .enumerate()
        .map(|(id, shard)| {
            DeviceState::new(
                id,
                &data.train,
                &data.fog_init,
                shard.clone(),
                fog_model.clone(),
                derive_seed(seed, &[stream::DEVICE, id as u64]),
            )
        })
        .collect::<Result<_>>()?;

    let ctx = SimContext {
        train: Arc::clone(&data.train),
        evaluator: evaluator.clone(),
        params: DeviceParams::from(cfg),
        acquisitions: cfg.acquisitions,
        curve_every: cfg.curve_every,
        snapshots: cfg.aggregation_points(),
        seed,
    };
    let mut model = fog_model.clone();
    let mut reports = Vec::new();
    let mut curves: Vec<LearningCurve> = Vec::new();
    for round in 1..=cfg.rounds {
        if devices.is_empty() {
            return Err(Error::NoUpdates { round });
        }
        let out = federation::run_round(&model, devices, cfg, &ctx, &data.validation, round)?;
        for c in out.curves {
            match curves.iter_mut().find(|e| e.entity == c.entity) {
                Some(existing) => existing.points.extend(c.points),
                None => curves.push(c),
            }
        }
        model = out.model;
        reports.extend(out.reports);
        devices = out.devices;
    }
    curves.sort_by_key(|c| {
        c.entity
            .strip_prefix("device-")
            .and_then(|d| d.parse::<usize>().ok())
            .unwrap_or(usize::MAX)
    });
    let mut fog_curve = LearningCurve::new("fog", cfg.strategy, seed);
    for r in reports.iter().filter(|r| r.acquisitions == cfg.acquisitions) {
        fog_curve.push(r.round * cfg.acquisitions, r.labeled_total, r.fog_accuracy);
    }
    curves.push(fog_curve);

    let baselines = run_baselines(cfg, &data, &fog_model, &evaluator, seed)?;
    Ok(ExperimentOutcome {
        seed,
        proportions: data.plan.proportions.clone(),
        fog_init_accuracy,
        reports,
        curves,
        baselines,
    })
}

/// Continues training the initial fog model centrally on random device
/// images: once per aggregation point when `matched_baseline` is set (as
/// many images as all devices labeled in the first round) and once on
/// `baseline_images` images.
fn run_baselines(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    fog_model: &ModelCheckpoint,
    evaluator: &Evaluator,
    seed: u64,
) -> Result<Vec<BaselineResult>> {
    let mut wanted: Vec<(Option<usize>, usize)> = Vec::new();
    if cfg.matched_baseline {
        for a in cfg.aggregation_points() {
            wanted.push((Some(a), cfg.n_devices * a * cfg.acquire_k));
        }
    }
    if let Some(n) = cfg.baseline_images {
        wanted.push((None, n));
    }
    let mut rng = rng_for(seed, &[stream::BASELINE]);
    let mut pool: Vec<usize> = data.plan.shards.iter().flatten().copied().collect();
    pool.sort_unstable();
    pool.shuffle(&mut rng);
    let mut out = Vec::with_capacity(wanted.len());
    for (acquisitions, images) in wanted {
        let images = images.min(pool.len());
        if images == 0 {
            continue;
        }
        let set = LabeledSet::from_dataset(&data.train, &pool[..images])?;
        let mut train_rng = rng_for(seed, &[stream::BASELINE, images as u64]);
        let model = bayes::train(fog_model, &set, &cfg.train_config(), &mut train_rng)?.model;
        let accuracy = evaluator.accuracy(&model)?;
        log::info!("seed {seed}: central baseline on {images} images: {accuracy:.4}");
        out.push(BaselineResult {
            acquisitions,
            images,
            accuracy,
        });
    }
    Ok(out)
}
