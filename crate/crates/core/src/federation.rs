//! Fog-node logic: dispatching the model, collecting device checkpoints and
//! merging them by parameter averaging or by picking the best one on a
//! validation slice.

use std::collections::VecDeque;
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::bayes::{self, ModelCheckpoint};
use crate::config::{Aggregation, ExperimentConfig};
use crate::dataset::Dataset;
use crate::edge::{run_cascade, CascadeGroup, DeviceRun, DeviceState, SimContext};
use crate::error::{Error, Result};
use crate::metrics::LearningCurve;
use crate::nn::{Sequential, Tensor};
use crate::rng::{rng_for, stream};

/// Per-contributor mixing weights, nonnegative and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    alpha: Vec<f64>,
}

impl AggregationWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Empty("aggregation weights"));
        }
        if alpha.iter().any(|&a| !(a >= 0.0 && a.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "weights must be nonnegative: {alpha:?}"
            )));
        }
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { alpha })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("aggregation weights"));
        }
        Ok(Self {
            alpha: vec![1.0 / n as f64; n],
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// Parameter-wise weighted sum, accumulated in `f64`. The result carries
/// the next round index.
pub fn aggregate_average(checkpoints: &[ModelCheckpoint], weights: &AggregationWeights) -> Result<ModelCheckpoint> {
    let first = checkpoints.first().ok_or(Error::Empty("checkpoint list"))?;
    if weights.len() != checkpoints.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} checkpoints",
            weights.len(),
            checkpoints.len()
        )));
    }
    if let Some(i) = checkpoints.iter().position(|c| !c.same_architecture(first)) {
        return Err(Error::InvalidArgument(format!(
            "checkpoint {i} has a different manifest from checkpoint 0"
        )));
    }
    let params = first
        .net
        .params()
        .iter()
        .enumerate()
        .map(|(p, t)| {
            let mut acc = vec![0.0f64; t.len()];
            for (c, &a) in checkpoints.iter().zip(weights.as_slice()) {
                for (s, &v) in acc.iter_mut().zip(c.net.params()[p].data()) {
                    *s += a * v as f64;
                }
            }
            Tensor::new(t.shape().to_vec(), acc.into_iter().map(|v| v as f32).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let net = Sequential::from_parts(first.net.input_shape().to_vec(), first.net.layers().to_vec(), params)?;
    Ok(ModelCheckpoint {
        net,
        round: checkpoints.iter().map(|c| c.round).max().unwrap_or(0) + 1,
    })
}

/// Which checkpoint won and how every one scored.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub model: ModelCheckpoint,
    pub accuracies: Vec<f64>,
}

/// The checkpoint with the highest validation accuracy; ties go to the
/// lowest index. Every checkpoint is scored under the same dropout masks.
pub fn select_optimal(
    checkpoints: &[ModelCheckpoint],
    validation: &Dataset,
    samples: usize,
    seed: u64,
) -> Result<Selection> {
    if checkpoints.is_empty() {
        return Err(Error::Empty("checkpoint list"));
    }
    if validation.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let accuracies = checkpoints
        .iter()
        .map(|c| bayes::evaluate_dataset(c, validation, samples, &mut rng_for(seed, &[stream::EVAL])))
        .collect::<Result<Vec<_>>>()?;
    let mut index = 0;
    for (i, &a) in accuracies.iter().enumerate() {
        if a > accuracies[index] {
            index = i;
        }
    }
    let mut model = checkpoints[index].clone();
    model.round = checkpoints.iter().map(|c| c.round).max().unwrap_or(0) + 1;
    Ok(Selection {
        index,
        model,
        accuracies,
    })
}

/// Restricts `weights` to the `returned` positions and renormalizes.
pub fn tolerate_partial(returned: &[usize], weights: &AggregationWeights) -> Result<AggregationWeights> {
    if returned.is_empty() {
        return Err(Error::Empty("returned device set"));
    }
    let mut seen = vec![false; weights.len()];
    let mut alpha = Vec::with_capacity(returned.len());
    for &i in returned {
        if i >= weights.len() {
            return Err(Error::OutOfRange {
                what: "aggregation weights",
                index: i,
                len: weights.len(),
            });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!("device position {i} returned twice")));
        }
        alpha.push(weights.as_slice()[i]);
    }
    let total: f64 = alpha.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("returned devices carry zero weight".into()));
    }
    AggregationWeights::new(alpha.into_iter().map(|a| a / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceAccuracy {
    pub device: usize,
    pub accuracy: f64,
}

/// Fog-node view of one aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    /// Acquisitions per device within the round at aggregation time.
    pub acquisitions: usize,
    pub strategy: Aggregation,
    /// Devices whose checkpoints were aggregated (chain tails when cascaded).
    pub contributing: Vec<usize>,
    /// Distinct labeled images across all devices, including the initial set.
    pub labeled_total: usize,
    pub fog_accuracy: f64,
    /// Test accuracy the other aggregation strategy would have produced.
    pub alternative_accuracy: f64,
    pub device_accuracies: Vec<DeviceAccuracy>,
    /// Validation accuracy of each contributing checkpoint.
    pub validation_accuracies: Vec<f64>,
    /// Device chosen by optimal selection.
    pub selected: usize,
    /// Wall-clock seconds of every completed cascade group. Not serialized,
    /// so that reruns produce identical files.
    #[serde(skip)]
    pub group_seconds: Vec<f64>,
}

impl RoundReport {
    pub fn accuracy_of(&self, strategy: Aggregation) -> f64 {
        if strategy == self.strategy {
            self.fog_accuracy
        } else {
            self.alternative_accuracy
        }
    }
}

/// Everything a federated round produced.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    /// The fog model after the final aggregation of the round.
    pub model: ModelCheckpoint,
    /// One report per aggregation point, the full round last.
    pub reports: Vec<RoundReport>,
    /// Devices that came back, in id order.
    pub devices: Vec<DeviceState>,
    pub curves: Vec<LearningCurve>,
}

type GroupJob = (usize, Vec<DeviceState>);
type GroupResult = (usize, Result<Vec<DeviceRun>>, f64);

/// Dispatches `fog` to every device, runs the cascade groups on a worker
/// pool, then aggregates the returned checkpoints at every aggregation
/// point of `ctx.snapshots`. Groups that fail, run past the timeout or
/// have a dropped tail are left out of the aggregation.
pub fn run_round(
    fog: &ModelCheckpoint,
    devices: Vec<DeviceState>,
    cfg: &ExperimentConfig,
    ctx: &SimContext,
    validation: &Dataset,
    round: usize,
) -> Result<RoundOutcome> {
    if devices.is_empty() {
        return Err(Error::Empty("device list"));
    }
    let groups = CascadeGroup::partition(devices.len(), cfg.cascade)?;
    let mut slots: Vec<Option<DeviceState>> = devices.into_iter().map(Some).collect();
    let mut jobs: VecDeque<GroupJob> = VecDeque::new();
    for (g, group) in groups.iter().enumerate() {
        let members = group
            .device_ids
            .iter()
            .map(|&i| slots[i].take().expect("each device is in one group"))
            .collect();
        jobs.push_back((g, members));
    }

    let workers = match cfg.workers {
        0 => thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        n => n,
    }
    .min(groups.len());
    let queue = Arc::new(Mutex::new(jobs));
    let (tx, rx) = mpsc::channel::<GroupResult>();
    for _ in 0..workers {
        let queue = Arc::clone(&queue);
        let tx = tx.clone();
        let fog = fog.clone();
        let ctx = ctx.clone();
        thread::spawn(move || loop {
            let job = queue.lock().map(|mut q| q.pop_front()).unwrap_or(None);
            let Some((g, members)) = job else { break };
            let started = Instant::now();
            let result = run_cascade(members, &fog, &ctx);
            if tx.send((g, result, started.elapsed().as_secs_f64())).is_err() {
                break;
            }
        });
    }
    drop(tx);

    let deadline = cfg
        .round_timeout_secs
        .map(|t| Instant::now() + Duration::from_secs_f64(t));
    let mut finished: Vec<Option<(Vec<DeviceRun>, f64)>> = vec![None; groups.len()];
    for _ in 0..groups.len() {
        let msg = match deadline {
            Some(d) => match rx.recv_timeout(d.saturating_duration_since(Instant::now())) {
                Ok(m) => m,
                Err(_) => {
                    log::warn!("round {round}: timeout, aggregating what has arrived");
                    break;
                }
            },
            None => match rx.recv() {
                Ok(m) => m,
                Err(_) => break,
            },
        };
        match msg {
            (g, Ok(runs), secs) => finished[g] = Some((runs, secs)),
            (g, Err(e), _) => log::warn!("round {round}: group {g} failed: {e}"),
        }
    }

    let mut uploads: Vec<(usize, &DeviceRun)> = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        let Some((runs, _)) = &finished[g] else { continue };
        if cfg.dropped_devices.contains(&group.tail()) {
            log::info!("round {round}: device {} did not upload", group.tail());
            continue;
        }
        uploads.push((g, runs.last().expect("groups are nonempty")));
    }
    if uploads.is_empty() {
        return Err(Error::NoUpdates { round });
    }
    let returned: Vec<usize> = uploads.iter().map(|(g, _)| *g).collect();
    let weights = tolerate_partial(&returned, &AggregationWeights::uniform(groups.len())?)?;
    let contributing: Vec<usize> = uploads.iter().map(|(_, r)| r.state.device_id).collect();
    let all_runs: Vec<&DeviceRun> = finished.iter().flatten().flat_map(|(runs, _)| runs).collect();
    let group_seconds: Vec<f64> = finished.iter().flatten().map(|(_, s)| *s).collect();
    log::info!("round {round}: group seconds {group_seconds:.1?}");

    let mut reports = Vec::new();
    let mut model = fog.clone();
    for (point_idx, &point) in ctx.snapshots.iter().enumerate() {
        let checkpoints: Vec<ModelCheckpoint> = uploads
            .iter()
            .map(|(_, run)| run.snapshots[point_idx].model.clone())
            .collect();
        let average = aggregate_average(&checkpoints, &weights)?;
        let selection = select_optimal(&checkpoints, validation, cfg.mc_samples, ctx.seed)?;
        let (chosen, other) = match cfg.aggregation {
            Aggregation::Average => (average, selection.model.clone()),
            Aggregation::Optimal => (selection.model.clone(), average),
        };
        let fog_accuracy = ctx.evaluator.accuracy(&chosen)?;
        let alternative_accuracy = ctx.evaluator.accuracy(&other)?;
        let device_accuracies = all_runs
            .iter()
            .filter_map(|r| {
                let start = r.state.acquisitions - ctx.acquisitions;
                r.curve.accuracy_at(start + point).map(|accuracy| DeviceAccuracy {
                    device: r.state.device_id,
                    accuracy,
                })
            })
            .collect();
        let labeled_total = cfg.m_init
            + all_runs
                .iter()
                .map(|r| r.snapshots[point_idx].labeled_count.saturating_sub(cfg.m_init))
                .sum::<usize>();
        log::info!(
            "round {round}, acquisition {point}: fog {} accuracy {fog_accuracy:.4}, {} {alternative_accuracy:.4}",
            cfg.aggregation,
            cfg.aggregation.other()
        );
        reports.push(RoundReport {
            round,
            acquisitions: point,
            strategy: cfg.aggregation,
            contributing: contributing.clone(),
            labeled_total,
            fog_accuracy,
            alternative_accuracy,
            device_accuracies,
            validation_accuracies: selection.accuracies,
            selected: contributing[selection.index],
            group_seconds: group_seconds.clone(),
        });
        model = chosen;
    }

    let mut devices = Vec::new();
    let mut curves = Vec::new();
    for (runs, _) in finished.into_iter().flatten() {
        for run in runs {
            curves.push(run.curve);
            devices.push(run.state);
        }
    }
    devices.sort_by_key(|d| d.device_id);
    Ok(RoundOutcome {
        model,
        reports,
        devices,
        curves,
    })
}
