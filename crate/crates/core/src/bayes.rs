//! MC-dropout LeNet: construction, SGD training, Monte-Carlo predictive
//! sampling and accuracy evaluation, plus the checkpoint format the fog node
//! and devices exchange.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, IMAGE_SIDE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{
    sgd_step, softmax_cross_entropy_batch, softmax_f64, Activation, DropoutMask, DropoutMode, LayerSpec, Sequential,
    Tensor,
};
use crate::rng::SimRng;

pub const DEFAULT_DROPOUT_CONV: f64 = 0.25;
pub const DEFAULT_DROPOUT_FC: f64 = 0.5;
pub const DEFAULT_MC_SAMPLES: usize = 16;

/// Rows pushed through the network at once during prediction.
const PREDICT_CHUNK: usize = 128;

/// A model as exchanged between fog node and devices: manifest plus
/// parameters, and the federated round that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub net: Sequential<f32>,
    pub round: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    round: u64,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FGCK";
const CHECKPOINT_VERSION: u32 = 1;

impl ModelCheckpoint {
    pub fn manifest(&self) -> &[LayerSpec] {
        self.net.layers()
    }

    /// Same architecture, input shape included.
    pub fn same_architecture(&self, other: &ModelCheckpoint) -> bool {
        self.net.input_shape() == other.net.input_shape() && self.net.layers() == other.net.layers()
    }

    /// Binary encoding: magic, version, a JSON manifest, then every named
    /// parameter as shape plus little-endian `f32` data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&Manifest {
            input_shape: self.net.input_shape().to_vec(),
            layers: self.net.layers().to_vec(),
            round: self.round,
        })
        .expect("manifest serializes");
        let mut out = Vec::with_capacity(64 + manifest.len() + 4 * self.net.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((manifest.len() as u32).to_le_bytes());
        out.extend(manifest);
        let named = self.net.named_params();
        out.extend((named.len() as u32).to_le_bytes());
        for (name, tensor) in named {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((tensor.rank() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            for v in tensor.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let manifest_len = r.u32()? as usize;
        let manifest: Manifest = serde_json::from_slice(r.take(manifest_len)?)?;
        let count = r.u32()? as usize;
        let mut names = Vec::with_capacity(count);
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.err("parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = r
                .take(len * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        let net = Sequential::from_parts(manifest.input_shape, manifest.layers, params)?;
        let expected: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        if expected != names {
            return Err(r.err("parameter names do not match the manifest"));
        }
        Ok(Self {
            net,
            round: manifest.round,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err("truncated")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn err(&self, detail: &str) -> Error {
        Error::Format {
            kind: "checkpoint",
            path: "<bytes>".into(),
            detail: format!("{detail} (offset {})", self.pos),
        }
    }
}

/// Dropout placement and activation of the LeNet builder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LenetOptions {
    pub dropout_conv: f64,
    pub dropout_fc: f64,
    pub activation: Activation,
}

impl Default for LenetOptions {
    fn default() -> Self {
        Self {
            dropout_conv: DEFAULT_DROPOUT_CONV,
            dropout_fc: DEFAULT_DROPOUT_FC,
            activation: Activation::Relu,
        }
    }
}

/// conv 6@5x5, avg-pool, conv 16@5x5, avg-pool, conv 120@5x5, FC 84, FC 10
/// on a 32x32x1 input. Dropout follows each pooling layer (`dropout_conv`)
/// and precedes each fully connected layer (`dropout_fc`).
pub fn lenet_manifest(opts: &LenetOptions) -> Vec<LayerSpec> {
    let act = opts.activation;
    vec![
        LayerSpec::conv("conv1", 6, 5, act),
        LayerSpec::avg_pool("pool1", 6),
        LayerSpec::dropout("drop1", 6, opts.dropout_conv),
        LayerSpec::conv("conv2", 16, 5, act),
        LayerSpec::avg_pool("pool2", 16),
        LayerSpec::dropout("drop2", 16, opts.dropout_conv),
        LayerSpec::conv("conv3", 120, 5, act),
        LayerSpec::dropout("drop3", 120, opts.dropout_fc),
        LayerSpec::dense("fc1", 84, act),
        LayerSpec::dropout("drop4", 84, opts.dropout_fc),
        LayerSpec::dense("fc2", NUM_CLASSES, Activation::Identity),
        LayerSpec::softmax("output", NUM_CLASSES),
    ]
}

pub fn build_lenet(dropout_conv: f64, dropout_fc: f64, seed: u64) -> Result<ModelCheckpoint> {
    build_lenet_with(
        &LenetOptions {
            dropout_conv,
            dropout_fc,
            ..LenetOptions::default()
        },
        seed,
    )
}

pub fn build_lenet_with(opts: &LenetOptions, seed: u64) -> Result<ModelCheckpoint> {
    let mut rng = crate::rng::rng_for(seed, &[crate::rng::stream::MODEL_INIT]);
    let net = Sequential::new([IMAGE_SIDE, IMAGE_SIDE, 1], lenet_manifest(opts), &mut rng)?;
    Ok(ModelCheckpoint { net, round: 0 })
}

/// Training examples with the pool index each one was acquired from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    images: Tensor<f32>,
    labels: Vec<usize>,
    provenance: Vec<usize>,
}

impl LabeledSet {
    pub fn empty() -> Self {
        Self {
            images: Tensor::from_parts(vec![0, IMAGE_SIDE, IMAGE_SIDE, 1], Vec::new()),
            labels: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn new(images: Tensor<f32>, labels: Vec<usize>, provenance: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() || labels.len() != provenance.len() {
            return Err(Error::shape(
                "labeled set",
                format!(
                    "images {:?}, {} labels, {} provenance entries",
                    images.shape(),
                    labels.len(),
                    provenance.len()
                ),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::OutOfRange {
                what: "class label",
                index: bad,
                len: NUM_CLASSES,
            });
        }
        Ok(Self {
            images,
            labels,
            provenance,
        })
    }

    /// Examples `indices` of `source`, remembering the indices as provenance.
    pub fn from_dataset(source: &Dataset, indices: &[usize]) -> Result<Self> {
        let mut set = Self::empty();
        set.extend_from(source, indices)?;
        Ok(set)
    }

    pub fn extend_from(&mut self, source: &Dataset, indices: &[usize]) -> Result<()> {
        let added = source.images().gather(indices)?;
        let mut data = std::mem::replace(&mut self.images, Tensor::from_vec(Vec::new())).into_data();
        data.extend_from_slice(added.data());
        let n = self.labels.len() + indices.len();
        self.images = Tensor::from_parts(vec![n, IMAGE_SIDE, IMAGE_SIDE, 1], data);
        self.labels.extend(indices.iter().map(|&i| source.labels()[i]));
        self.provenance.extend_from_slice(indices);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &[usize] {
        &self.provenance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 0.1,
            batch_size: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelCheckpoint,
    /// Mean training loss of every epoch, dropout active.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch SGD on cross-entropy with dropout active. Each epoch visits
/// the examples in a fresh random order.
pub fn train(model: &ModelCheckpoint, data: &LabeledSet, cfg: &TrainConfig, rng: &mut SimRng) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("bad learning rate {}", cfg.lr)));
    }
    let mut model = model.clone();
    let lr = cfg.lr as f32;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = data.images().gather(batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let (logits, tape) = model.net.forward_recorded(&x, DropoutMode::Sample(rng))?;
            let (loss, _, grad) = softmax_cross_entropy_batch(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            let grads = model.net.backward(tape, &grad)?;
            sgd_step(model.net.params_mut(), &grads, lr)?;
            total += loss as f64 * batch.len() as f64;
        }
        epoch_losses.push(total / data.len() as f64);
    }
    Ok(TrainOutcome { model, epoch_losses })
}

/// `T` stochastic class-probability vectors for one input and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct McPrediction {
    samples: Vec<Vec<f64>>,
    mean: Vec<f64>,
}

impl McPrediction {
    pub fn from_samples(samples: Vec<Vec<f64>>) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("MC samples"))?;
        let classes = first.len();
        if classes < 2 || samples.iter().any(|s| s.len() != classes) {
            return Err(Error::shape(
                "McPrediction",
                "samples must share a class count of at least 2",
            ));
        }
        for s in &samples {
            let sum: f64 = s.iter().sum();
            #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
            if s.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(
                    "each MC sample must be a probability vector".into(),
                ));
            }
        }
        // Averaging offsets from the first sample keeps the mean bit-equal to
        // the samples when they all coincide.
        let t = samples.len() as f64;
        let mean = (0..classes)
            .map(|c| {
                let base = samples[0][c];
                base + samples.iter().map(|s| s[c] - base).sum::<f64>() / t
            })
            .collect();
        Ok(Self { samples, mean })
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn num_classes(&self) -> usize {
        self.mean.len()
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.mean)
    }
}

/// Index of the largest entry, the lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn as_batch(model: &ModelCheckpoint, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    if x.shape() == model.net.input_shape() {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        x.clone().reshape(shape)
    } else {
        Ok(x.clone())
    }
}

/// Runs `samples` weight draws over a batch, calling `sink(t, row, probs)`
/// for each draw and input. Draw `t` uses one dropout mask per layer shared
/// by every input, so results do not depend on batch order or chunking.
fn for_each_mc_pass(
    model: &ModelCheckpoint,
    x: &Tensor<f32>,
    samples: usize,
    rng: &mut SimRng,
    mut sink: impl FnMut(usize, usize, Vec<f64>),
) -> Result<()> {
    if samples == 0 {
        return Err(Error::InvalidArgument("MC sample count must be at least 1".into()));
    }
    let x = as_batch(model, x)?;
    let n = x.shape()[0];
    let net = &model.net;
    let stochastic = net.has_stochastic_layers();
    let masks: Vec<Vec<DropoutMask<f32>>> = if stochastic {
        (0..samples).map(|_| net.sample_masks(rng)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let start = net.stochastic_start();
    let classes = net.num_classes();
    for chunk_start in (0..n).step_by(PREDICT_CHUNK) {
        let chunk_end = (chunk_start + PREDICT_CHUNK).min(n);
        let chunk = x.rows(chunk_start, chunk_end);
        let hidden = net.forward_prefix(&chunk, start)?;
        let passes = if stochastic { samples } else { 1 };
        #[allow(clippy::needless_range_loop)]
        for t in 0..passes {
            let mode = if stochastic {
                DropoutMode::Shared(&masks[t])
            } else {
                DropoutMode::Off
            };
            let logits = net.forward_suffix(hidden.clone(), start, mode)?;
            if !logits.is_finite() {
                return Err(Error::NonFinite("logits"));
            }
            for (r, row) in logits.data().chunks_exact(classes).enumerate() {
                let row: Vec<f64> = row.iter().map(|&z| z as f64).collect();
                let probs = softmax_f64(&row);
                if stochastic {
                    sink(t, chunk_start + r, probs);
                } else {
                    for t in 0..samples {
                        sink(t, chunk_start + r, probs.clone());
                    }
                }
            }
        }
    }
    Ok(())
}

/// MC-dropout predictive distribution for each input of a batch (or a
/// single `[32, 32, 1]` image).
pub fn mc_predict(
    model: &ModelCheckpoint,
    x: &Tensor<f32>,
    samples: usize,
    rng: &mut SimRng,
) -> Result<Vec<McPrediction>> {
    let n = as_batch(model, x)?.shape()[0];
    let mut per_input: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(samples); n];
    for_each_mc_pass(model, x, samples, rng, |_, row, probs| per_input[row].push(probs))?;
    per_input.into_iter().map(McPrediction::from_samples).collect()
}

/// Mean predictive distributions only, without keeping the samples.
pub fn mc_mean(model: &ModelCheckpoint, x: &Tensor<f32>, samples: usize, rng: &mut SimRng) -> Result<Vec<Vec<f64>>> {
    let n = as_batch(model, x)?.shape()[0];
    let classes = model.net.num_classes();
    let mut sums = vec![vec![0.0; classes]; n];
    for_each_mc_pass(model, x, samples, rng, |_, row, probs| {
        for (s, p) in sums[row].iter_mut().zip(probs) {
            *s += p;
        }
    })?;
    let t = samples as f64;
    Ok(sums
        .into_iter()
        .map(|s| s.into_iter().map(|v| v / t).collect())
        .collect())
}

/// Fraction of inputs whose MC-mean argmax equals the label.
pub fn evaluate(
    model: &ModelCheckpoint,
    images: &Tensor<f32>,
    labels: &[usize],
    samples: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if images.rank() != 4 || images.shape()[0] != labels.len() {
        return Err(Error::shape(
            "evaluate",
            format!("images {:?} vs {} labels", images.shape(), labels.len()),
        ));
    }
    let means = mc_mean(model, images, samples, rng)?;
    let correct = means.iter().zip(labels).filter(|(m, &l)| argmax(m) == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn evaluate_dataset(model: &ModelCheckpoint, data: &Dataset, samples: usize, rng: &mut SimRng) -> Result<f64> {
    evaluate(model, data.images(), data.labels(), samples, rng)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn lenet_schedule() {
        let m = build_lenet(0.25, 0.5, 1).unwrap();
        let named = m.net.named_params();
        let conv1: usize = named[..2].iter().map(|(_, t)| t.len()).sum();
        assert_eq!(conv1, 5 * 5 * 6 + 6);
        assert_eq!(named[0].1.shape(), &[5, 5, 1, 6]);
        assert_eq!(named[4].1.shape(), &[5, 5, 16, 120]);
        assert_eq!(named[6].1.shape(), &[120, 84]);
        assert_eq!(named[8].1.shape(), &[84, 10]);
        assert_eq!(m.net.num_classes(), 10);
        assert_eq!(m.net.param_count(), 61_706);
        assert_eq!(m, build_lenet(0.25, 0.5, 1).unwrap());
        assert_ne!(m, build_lenet(0.25, 0.5, 2).unwrap());
    }

    #[test]
    fn lenet_rejects_bad_rates() {
        assert!(build_lenet(1.0, 0.5, 0).is_err());
        assert!(build_lenet(0.2, -0.5, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut m = build_lenet(0.25, 0.5, 4).unwrap();
        m.round = 7;
        let bytes = m.to_bytes();
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        assert!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelCheckpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(ModelCheckpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn mc_prediction_mean_and_validation() {
        let p = McPrediction::from_samples(vec![vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        assert_eq!(p.mean(), &[0.5, 0.5]);
        let same = vec![0.3, 0.3, 0.4];
        let p = McPrediction::from_samples(vec![same.clone(); 3]).unwrap();
        assert_eq!(p.mean(), same.as_slice());
        assert!(McPrediction::from_samples(vec![]).is_err());
        assert!(McPrediction::from_samples(vec![vec![0.5, 0.6]]).is_err());
        assert!(McPrediction::from_samples(vec![vec![1.0]]).is_err());
    }

    fn toy_images(n: usize, seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = SimRng::seed_from_u64(seed);
        let data = (0..n * 1024).map(|_| rng.gen::<f32>()).collect();
        Tensor::new(vec![n, 32, 32, 1], data).unwrap()
    }

    #[test]
    fn zero_dropout_gives_identical_samples() {
        let m = build_lenet(0.0, 0.0, 3).unwrap();
        let x = toy_images(3, 1);
        let preds = mc_predict(&m, &x, 5, &mut SimRng::seed_from_u64(0)).unwrap();
        for p in &preds {
            assert!(p.samples().iter().all(|s| s == &p.samples()[0]));
            assert_eq!(p.mean(), p.samples()[0].as_slice());
        }
    }

    #[test]
    fn single_sample_mean_equals_sample() {
        let m = build_lenet(0.25, 0.5, 3).unwrap();
        let x = toy_images(1, 2);
        let single = x.rows(0, 1).reshape(vec![32, 32, 1]).unwrap();
        let preds = mc_predict(&m, &single, 1, &mut SimRng::seed_from_u64(5)).unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].mean(), preds[0].samples()[0].as_slice());
        assert!(mc_predict(&m, &single, 0, &mut SimRng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn mc_passes_ignore_batch_composition() {
        let m = build_lenet(0.25, 0.5, 8).unwrap();
        let x = toy_images(6, 3);
        let all = mc_predict(&m, &x, 4, &mut SimRng::seed_from_u64(11)).unwrap();
        let order = [5, 2, 0, 4, 1, 3];
        let shuffled = x.gather(&order).unwrap();
        let perm = mc_predict(&m, &shuffled, 4, &mut SimRng::seed_from_u64(11)).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(perm[k], all[i]);
        }
    }

    #[test]
    fn train_rejects_empty_and_keeps_model_at_zero_epochs() {
        let m = build_lenet(0.25, 0.5, 1).unwrap();
        let mut rng = SimRng::seed_from_u64(0);
        assert!(train(&m, &LabeledSet::empty(), &TrainConfig::default(), &mut rng).is_err());
        let set = LabeledSet::new(toy_images(4, 9), vec![0, 1, 2, 3], vec![0, 1, 2, 3]).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&m, &set, &cfg, &mut rng).unwrap();
        assert_eq!(out.model, m);
        assert!(out.epoch_losses.is_empty());
    }

    #[test]
    fn evaluate_rejects_empty() {
        let m = build_lenet(0.25, 0.5, 1).unwrap();
        let empty = Tensor::from_parts(vec![0, 32, 32, 1], vec![]);
        assert!(evaluate(&m, &empty, &[], 4, &mut SimRng::seed_from_u64(0)).is_err());
    }
}
