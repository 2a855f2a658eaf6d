//! Experiment configuration and command-line parsing.
//!
//! Precedence is command-line flag, then config file, then built-in default.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Parser;
use serde::{Deserialize, Serialize};

use crate::acquisition::Strategy;
use crate::bayes::{LenetOptions, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Average,
    Optimal,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Average => "average",
            Aggregation::Optimal => "optimal",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Aggregation::Average => Aggregation::Optimal,
            Aggregation::Optimal => Aggregation::Average,
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "average" | "ave" | "avg" => Ok(Aggregation::Average),
            "optimal" | "opt" => Ok(Aggregation::Optimal),
            _ => Err(Error::Config(format!(
                "unknown aggregation '{s}' (valid: average, optimal)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_devices: usize,
    /// Acquisition rounds per device per federated round.
    pub acquisitions: usize,
    pub pool_size: usize,
    pub acquire_k: usize,
    pub strategy: Strategy,
    pub aggregation: Aggregation,
    /// Devices per cascade chain; 1 disables cascading.
    pub cascade: usize,
    /// Class-balanced images the fog node trains its initial model on.
    pub m_init: usize,
    pub mc_samples: usize,
    pub dropout_conv: f64,
    pub dropout_fc: f64,
    pub activation: Activation,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub repeats: usize,
    pub rounds: usize,
    /// Training images reserved for the fog node, disjoint from device shards.
    pub fog_reserve: usize,
    /// Test images held out for optimal-model selection.
    pub validation_size: usize,
    /// Test images used for every reported accuracy (after the validation slice).
    pub test_size: usize,
    /// Evaluate device models every this many acquisitions (the last one is
    /// always evaluated).
    pub curve_every: usize,
    /// Fixed device data proportions; drawn at random when absent.
    pub proportions: Option<Vec<f64>>,
    /// Earlier acquisition counts at which the fog node also aggregates a
    /// snapshot of the device models (the last acquisition always counts).
    pub snapshots: Vec<usize>,
    /// Size of a centrally trained comparison set, if any.
    pub baseline_images: Option<usize>,
    /// At every aggregation point, also keep training the initial model on
    /// as many random device images as the devices labeled in total.
    pub matched_baseline: bool,
    /// Devices that never upload (simulated stragglers).
    pub dropped_devices: Vec<usize>,
    /// Aggregate whatever arrived after this many seconds.
    pub round_timeout_secs: Option<f64>,
    /// Worker threads for device training (0 = available parallelism).
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_devices: 4,
            acquisitions: 10,
            pool_size: 200,
            acquire_k: 10,
            strategy: Strategy::Entropy,
            aggregation: Aggregation::Average,
            cascade: 1,
            m_init: 20,
            mc_samples: crate::bayes::DEFAULT_MC_SAMPLES,
            dropout_conv: crate::bayes::DEFAULT_DROPOUT_CONV,
            dropout_fc: crate::bayes::DEFAULT_DROPOUT_FC,
            activation: Activation::Relu,
            lr: 0.1,
            epochs: 50,
            batch_size: 10,
            seed: 0,
            repeats: 1,
            rounds: 1,
            fog_reserve: 1000,
            validation_size: 1000,
            test_size: 9000,
            curve_every: 1,
            proportions: None,
            snapshots: Vec::new(),
            baseline_images: None,
            matched_baseline: false,
            dropped_devices: Vec::new(),
            round_timeout_secs: None,
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("devices", self.n_devices),
            ("pool-size", self.pool_size),
            ("acquire-k", self.acquire_k),
            ("cascade", self.cascade),
            ("mc-samples", self.mc_samples),
            ("batch-size", self.batch_size),
            ("repeats", self.repeats),
            ("rounds", self.rounds),
            ("test-size", self.test_size),
            ("validation-size", self.validation_size),
            ("curve-every", self.curve_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("--{name} must be positive")));
            }
        }
        if !self.n_devices.is_multiple_of(self.cascade) {
            return Err(Error::Config(format!(
                "cascade group size {} does not divide device count {}",
                self.cascade, self.n_devices
            )));
        }
        if self.acquire_k > self.pool_size {
            return Err(Error::Config(format!(
                "acquire-k {} exceeds pool size {}",
                self.acquire_k, self.pool_size
            )));
        }
        for (name, rate) in [("dropout-conv", self.dropout_conv), ("dropout-fc", self.dropout_fc)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("--{name} must lie in [0, 1), got {rate}")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("--lr must be positive, got {}", self.lr)));
        }
        if let Some(p) = &self.proportions {
            #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
            if p.len() != self.n_devices || p.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::Config("proportions need one positive entry per device".into()));
            }
        }
        if let Some(&d) = self.dropped_devices.iter().find(|&&d| d >= self.n_devices) {
            return Err(Error::Config(format!("dropped device {d} does not exist")));
        }
        if let Some(&a) = self.snapshots.iter().find(|&&a| a == 0 || a > self.acquisitions) {
            return Err(Error::Config(format!(
                "snapshot at {a} acquisitions is outside 1..={}",
                self.acquisitions
            )));
        }
        if let Some(t) = self.round_timeout_secs {
            #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
            if !(t > 0.0) {
                return Err(Error::Config("round timeout must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
        }
    }

    pub fn lenet_options(&self) -> LenetOptions {
        LenetOptions {
            dropout_conv: self.dropout_conv,
            dropout_fc: self.dropout_fc,
            activation: self.activation,
        }
    }

    /// Acquisition counts at which the fog node aggregates, ascending and
    /// ending with the full round.
    pub fn aggregation_points(&self) -> Vec<usize> {
        let mut points = self.snapshots.clone();
        points.push(self.acquisitions);
        points.sort_unstable();
        points.dedup();
        points
    }

    /// Seeds of the repeated runs.
    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.seed + r).collect()
    }

    /// Reads a config file: either a bare config object or a results
    /// summary carrying one under `"config"`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let value = match value.get("config") {
            Some(inner) if inner.is_object() => inner.clone(),
            _ => value,
        };
        Ok(serde_json::from_value(value)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Window,
    AcqCount,
    FlVsCentral,
    Massive,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Window, Preset::AcqCount, Preset::FlVsCentral, Preset::Massive];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Window => "window",
            Preset::AcqCount => "acq-count",
            Preset::FlVsCentral => "fl-vs-central",
            Preset::Massive => "massive",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown preset '{s}' (valid: window, acq-count, fl-vs-central, massive)"
            ))
        })
    }
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_aggregation(s: &str) -> std::result::Result<Aggregation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Simulates pool-based active learning on edge devices with fog-node
/// model aggregation, on MNIST.
#[derive(Debug, Parser)]
#[command(name = "fogal", version)]
struct Cli {
    /// JSON config file (a bare config or a results summary).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    acquisitions: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    acquire_k: Option<usize>,
    /// entropy | bald | vr | random
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// average | optimal
    #[arg(long, value_parser = parse_aggregation)]
    aggregation: Option<Aggregation>,
    /// Devices per cascade chain (1 = no cascading).
    #[arg(long)]
    cascade: Option<usize>,
    #[arg(long)]
    init_images: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout_conv: Option<f64>,
    #[arg(long)]
    dropout_fc: Option<f64>,
    #[arg(long)]
    test_size: Option<usize>,
    /// Also train a centralized model on this many images.
    #[arg(long)]
    baseline_images: Option<usize>,
    /// window | acq-count | fl-vs-central | massive
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Directory with the four uncompressed MNIST IDX files.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// A fully resolved command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub config: ExperimentConfig,
    pub preset: Option<Preset>,
    pub mnist_dir: Option<PathBuf>,
    pub out: PathBuf,
}

/// Parses command-line arguments (including the program name) into a
/// validated configuration. Usage errors come back as `Error::Config`
/// carrying clap's rendered message.
pub fn parse_config<I, T>(args: I) -> Result<Invocation>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            Error::Usage(e.render().to_string())
        }
        _ => Error::Config(e.render().to_string()),
    })?;
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = cli.$flag.clone() { cfg.$field = v; })*
        };
    }
    set!(
        devices => n_devices,
        acquisitions => acquisitions,
        pool_size => pool_size,
        acquire_k => acquire_k,
        strategy => strategy,
        aggregation => aggregation,
        cascade => cascade,
        init_images => m_init,
        mc_samples => mc_samples,
        seed => seed,
        repeats => repeats,
        rounds => rounds,
        epochs => epochs,
        lr => lr,
        batch_size => batch_size,
        dropout_conv => dropout_conv,
        dropout_fc => dropout_fc,
        test_size => test_size,
    );
    if cli.baseline_images.is_some() {
        cfg.baseline_images = cli.baseline_images;
    }
    cfg.validate()?;
    Ok(Invocation {
        config: cfg,
        preset: cli.preset,
        mnist_dir: cli.mnist_dir,
        out: cli.out,
    })
}
