use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::ops::{self, Activation, DropoutMask};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Convolution,
    AveragePool,
    Dense,
    Dropout,
    Softmax,
}

/// One entry of an architecture manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub output_channels_or_nodes: usize,
    pub kernel_size: Option<usize>,
    pub dropout_rate: Option<f64>,
    #[serde(default)]
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv(name: &str, filters: usize, kernel: usize, activation: Activation) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Convolution,
            output_channels_or_nodes: filters,
            kernel_size: Some(kernel),
            dropout_rate: None,
            activation,
        }
    }

    pub fn avg_pool(name: &str, channels: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::AveragePool,
            output_channels_or_nodes: channels,
            kernel_size: Some(2),
            dropout_rate: None,
            activation: Activation::Identity,
        }
    }

    pub fn dense(name: &str, nodes: usize, activation: Activation) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Dense,
            output_channels_or_nodes: nodes,
            kernel_size: None,
            dropout_rate: None,
            activation,
        }
    }

    /// `width` is the channel or node count of the layer being masked.
    pub fn dropout(name: &str, width: usize, rate: f64) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Dropout,
            output_channels_or_nodes: width,
            kernel_size: None,
            dropout_rate: Some(rate),
            activation: Activation::Identity,
        }
    }

    pub fn softmax(name: &str, classes: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Softmax,
            output_channels_or_nodes: classes,
            kernel_size: None,
            dropout_rate: None,
            activation: Activation::Identity,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::InvalidArgument(format!("layer {}: {why}", self.name)));
        if self.output_channels_or_nodes == 0 {
            return bad("output width must be positive");
        }
        match self.kind {
            LayerKind::Convolution | LayerKind::AveragePool => {
                if !matches!(self.kernel_size, Some(k) if k > 0) {
                    return bad("missing kernel size");
                }
                if self.kind == LayerKind::AveragePool && self.kernel_size != Some(2) {
                    return bad("only 2x2 pooling is supported");
                }
            }
            LayerKind::Dropout => match self.dropout_rate {
                Some(r) => ops::check_rate(r)?,
                None => return bad("missing dropout rate"),
            },
            LayerKind::Dense | LayerKind::Softmax => {}
        }
        Ok(())
    }
}

/// How dropout layers behave during a forward pass.
pub enum DropoutMode<'a, T> {
    /// Identity (rates are ignored).
    Off,
    /// Fresh independent mask for every element of every example.
    Sample(&'a mut dyn RngCore),
    /// One pre-drawn mask per dropout layer, shared by every example in the
    /// batch: a single weight sample of the MC-dropout posterior.
    Shared(&'a [DropoutMask<T>]),
}

enum Record<T> {
    Conv {
        layer: usize,
        input_dims: [usize; 4],
        cols: Vec<T>,
        output: Vec<T>,
    },
    Pool {
        input_dims: [usize; 4],
    },
    Dense {
        layer: usize,
        rows: usize,
        width: usize,
        input: Vec<T>,
        output: Vec<T>,
    },
    Dropout {
        mask: Vec<T>,
    },
}

/// Reverse-order record of a forward pass, consumed by
/// [`Sequential::backward`].
pub struct GradientTape<T> {
    records: Vec<Record<T>>,
    batch: usize,
}

impl<T> GradientTape<T> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// A feed-forward stack of [`LayerSpec`]s with its parameters.
///
/// Parameters are stored in manifest order, a weight followed by a bias for
/// every convolution and dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequential<T = f32> {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Sequential<T> {
    /// Builds a network with Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(input_shape: [usize; 3], layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let shapes = infer_shapes(&input_shape, &layers)?;
        let mut params = Vec::new();
        for (spec, in_shape) in layers.iter().zip(&shapes) {
            let (w_shape, fan_in, fan_out) = match spec.kind {
                LayerKind::Convolution => {
                    let k = spec.kernel_size.unwrap_or(1);
                    let c = in_shape[2];
                    let f = spec.output_channels_or_nodes;
                    (vec![k, k, c, f], k * k * c, k * k * f)
                }
                LayerKind::Dense => {
                    let n: usize = in_shape.iter().product();
                    let m = spec.output_channels_or_nodes;
                    (vec![n, m], n, m)
                }
                _ => continue,
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let len: usize = w_shape.iter().product();
            let w = (0..len).map(|_| T::lit(rng.gen_range(-limit..limit))).collect();
            let bias_len = *w_shape.last().unwrap();
            params.push(Tensor::from_parts(w_shape, w));
            params.push(Tensor::zeros(vec![bias_len]));
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
            params,
        })
    }

    /// Reassembles a network from a manifest and parameters, checking that
    /// every parameter shape agrees with the manifest.
    pub fn from_parts(input_shape: Vec<usize>, layers: Vec<LayerSpec>, params: Vec<Tensor<T>>) -> Result<Self> {
        let expected = Self::expected_param_shapes(&input_shape, &layers)?;
        if expected.len() != params.len() {
            return Err(Error::shape(
                "network",
                format!("{} parameters, manifest needs {}", params.len(), expected.len()),
            ));
        }
        for (p, e) in params.iter().zip(&expected) {
            if p.shape() != e.as_slice() {
                return Err(Error::shape(
                    "network",
                    format!("parameter {:?} where manifest needs {e:?}", p.shape()),
                ));
            }
        }
        Ok(Self {
            input_shape,
            layers,
            params,
        })
    }

    pub fn expected_param_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
        let shapes = infer_shapes(input_shape, layers)?;
        let mut out = Vec::new();
        for (spec, in_shape) in layers.iter().zip(&shapes) {
            match spec.kind {
                LayerKind::Convolution => {
                    let k = spec.kernel_size.unwrap_or(1);
                    let f = spec.output_channels_or_nodes;
                    out.push(vec![k, k, in_shape[2], f]);
                    out.push(vec![f]);
                }
                LayerKind::Dense => {
                    let m = spec.output_channels_or_nodes;
                    out.push(vec![in_shape.iter().product(), m]);
                    out.push(vec![m]);
                }
                _ => {}
            }
        }
        Ok(out)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// `(name, tensor)` pairs, e.g. `conv1.weight`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut names = Vec::with_capacity(self.params.len());
        for spec in &self.layers {
            if matches!(spec.kind, LayerKind::Convolution | LayerKind::Dense) {
                names.push(format!("{}.weight", spec.name));
                names.push(format!("{}.bias", spec.name));
            }
        }
        names.into_iter().zip(self.params.iter()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find(|l| l.kind != LayerKind::Softmax && l.kind != LayerKind::Dropout)
            .map(|l| l.output_channels_or_nodes)
            .unwrap_or(0)
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        Sequential {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Index of the first dropout layer with a nonzero rate; every layer
    /// before it is deterministic.
    pub fn stochastic_start(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.kind == LayerKind::Dropout && l.dropout_rate.unwrap_or(0.0) > 0.0)
            .unwrap_or(self.layers.len())
    }

    pub fn has_stochastic_layers(&self) -> bool {
        self.stochastic_start() < self.layers.len()
    }

    /// Draws one mask per dropout layer with per-example unit shapes.
    pub fn sample_masks(&self, rng: &mut dyn RngCore) -> Result<Vec<DropoutMask<T>>> {
        let shapes = infer_shapes(&self.input_shape, &self.layers)?;
        self.layers
            .iter()
            .zip(shapes)
            .filter(|(l, _)| l.kind == LayerKind::Dropout)
            .map(|(l, shape)| DropoutMask::sample(shape, l.dropout_rate.unwrap_or(0.0), rng))
            .collect()
    }

    /// Logits `[N, classes]` for a batch `[N, H, W, C]`.
    pub fn forward(&self, x: &Tensor<T>, mode: DropoutMode<'_, T>) -> Result<Tensor<T>> {
        let x = self.batched(x)?;
        self.run(x, 0..self.layers.len(), mode, None)
    }

    /// Runs layers `[0, end)` with dropout disabled. Used to cache the
    /// deterministic prefix ahead of repeated stochastic passes.
    pub fn forward_prefix(&self, x: &Tensor<T>, end: usize) -> Result<Tensor<T>> {
        let x = self.batched(x)?;
        self.run(x, 0..end, DropoutMode::Off, None)
    }

    /// Continues from the output of [`Self::forward_prefix`] at `start`.
    /// Shared masks must still list every dropout layer of the network.
    pub fn forward_suffix(&self, hidden: Tensor<T>, start: usize, mode: DropoutMode<'_, T>) -> Result<Tensor<T>> {
        self.run(hidden, start..self.layers.len(), mode, None)
    }

    /// Forward pass that keeps the record needed by [`Self::backward`].
    pub fn forward_recorded(&self, x: &Tensor<T>, mode: DropoutMode<'_, T>) -> Result<(Tensor<T>, GradientTape<T>)> {
        let x = self.batched(x)?;
        let mut tape = GradientTape {
            records: Vec::with_capacity(self.layers.len()),
            batch: x.shape()[0],
        };
        let logits = self.run(x, 0..self.layers.len(), mode, Some(&mut tape))?;
        Ok((logits, tape))
    }

    /// Gradients of a scalar loss for every parameter, in parameter order,
    /// given the loss gradient with respect to the logits.
    pub fn backward(&self, tape: GradientTape<T>, grad_logits: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let classes = self.num_classes();
        if grad_logits.shape() != [tape.batch, classes] {
            return Err(Error::shape(
                "backward",
                format!(
                    "logit gradient {:?}, expected [{}, {classes}]",
                    grad_logits.shape(),
                    tape.batch
                ),
            ));
        }
        let offsets = self.param_offsets();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        let mut grad = grad_logits.data().to_vec();
        let n_records = tape.records.len();
        for (pos, record) in tape.records.into_iter().enumerate().rev() {
            let need_input = pos > 0;
            match record {
                Record::Conv {
                    layer,
                    input_dims,
                    cols,
                    output,
                } => {
                    self.layers[layer].activation.backprop(&output, &mut grad);
                    let p = offsets[layer].expect("conv layer has parameters");
                    let (dw, db, dx) = ops::conv2d_backward(input_dims, &cols, &self.params[p], &grad, need_input);
                    grads[p] = Some(dw);
                    grads[p + 1] = Some(db);
                    grad = dx.unwrap_or_default();
                }
                Record::Pool { input_dims } => {
                    grad = ops::avgpool2x2_backward(input_dims, &grad);
                }
                Record::Dense {
                    layer,
                    rows,
                    width,
                    input,
                    output,
                } => {
                    self.layers[layer].activation.backprop(&output, &mut grad);
                    let p = offsets[layer].expect("dense layer has parameters");
                    let m = self.layers[layer].output_channels_or_nodes;
                    let (dw, db, dx) =
                        ops::affine_rows_backward(rows, &input, width, self.params[p].data(), &grad, m, need_input);
                    grads[p] = Some(Tensor::from_parts(vec![width, m], dw));
                    grads[p + 1] = Some(Tensor::from_parts(vec![m], db));
                    grad = dx.unwrap_or_default();
                }
                Record::Dropout { mask } => {
                    for (g, m) in grad.iter_mut().zip(&mask) {
                        *g = *g * *m;
                    }
                }
            }
        }
        debug_assert!(n_records > 0 || self.params.is_empty());
        grads
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| Ok(g.unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))))
            .collect()
    }

    fn param_offsets(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Convolution | LayerKind::Dense => {
                    next += 2;
                    Some(next - 2)
                }
                _ => None,
            })
            .collect()
    }

    fn batched(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape();
        if shape == self.input_shape.as_slice() {
            let mut s = vec![1];
            s.extend_from_slice(shape);
            return x.clone().reshape(s);
        }
        if shape.len() == self.input_shape.len() + 1 && shape[1..] == self.input_shape[..] {
            return Ok(x.clone());
        }
        Err(Error::shape(
            "forward",
            format!("input {shape:?} does not match network input {:?}", self.input_shape),
        ))
    }

    fn run(
        &self,
        mut x: Tensor<T>,
        range: std::ops::Range<usize>,
        mut mode: DropoutMode<'_, T>,
        mut tape: Option<&mut GradientTape<T>>,
    ) -> Result<Tensor<T>> {
        let offsets = self.param_offsets();
        let dropout_ordinal: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |count, l| {
                let idx = *count;
                if l.kind == LayerKind::Dropout {
                    *count += 1;
                }
                Some(idx)
            })
            .collect();
        let batch = x.shape()[0];
        let reaches_head = range.end == self.layers.len();
        for layer in range {
            let spec = &self.layers[layer];
            x = match spec.kind {
                LayerKind::Convolution => {
                    let p = offsets[layer].expect("conv layer has parameters");
                    let input_dims = dims4(x.shape())?;
                    let (out, cols) =
                        ops::conv2d_forward_cached(&x, &self.params[p], &self.params[p + 1], spec.activation)?;
                    if let Some(t) = tape.as_deref_mut() {
                        t.records.push(Record::Conv {
                            layer,
                            input_dims,
                            cols,
                            output: out.data().to_vec(),
                        });
                    }
                    out
                }
                LayerKind::AveragePool => {
                    let input_dims = dims4(x.shape())?;
                    let out = ops::avgpool2x2(&x)?;
                    if let Some(t) = tape.as_deref_mut() {
                        t.records.push(Record::Pool { input_dims });
                    }
                    out
                }
                LayerKind::Dense => {
                    let p = offsets[layer].expect("dense layer has parameters");
                    let (rows, width, _) = ops::dense_rows(x.shape())?;
                    ops::check_dense(width, self.params[p].shape(), self.params[p + 1].shape())?;
                    let out = ops::affine_rows(
                        rows,
                        x.data(),
                        width,
                        self.params[p].data(),
                        self.params[p + 1].data(),
                        spec.activation,
                    );
                    if let Some(t) = tape.as_deref_mut() {
                        t.records.push(Record::Dense {
                            layer,
                            rows,
                            width,
                            input: x.into_data(),
                            output: out.clone(),
                        });
                    }
                    Tensor::from_parts(vec![rows, spec.output_channels_or_nodes], out)
                }
                LayerKind::Dropout => {
                    let rate = spec.dropout_rate.unwrap_or(0.0);
                    let mask: Option<Vec<T>> = match &mut mode {
                        DropoutMode::Off => None,
                        _ if rate == 0.0 => None,
                        DropoutMode::Sample(rng) => Some(
                            DropoutMask::sample(x.shape().to_vec(), rate, &mut **rng)?
                                .mask
                                .into_data(),
                        ),
                        DropoutMode::Shared(masks) => {
                            let m = masks
                                .get(dropout_ordinal[layer])
                                .ok_or_else(|| Error::InvalidArgument("missing shared dropout mask".into()))?;
                            let unit = m.mask.data();
                            if unit.len() * batch != x.len() {
                                return Err(Error::shape(
                                    "dropout",
                                    format!("mask {:?} does not cover activation {:?}", m.mask.shape(), x.shape()),
                                ));
                            }
                            Some(unit.repeat(batch))
                        }
                    };
                    match mask {
                        Some(mask) => {
                            for (v, &m) in x.data_mut().iter_mut().zip(&mask) {
                                *v = *v * m;
                            }
                            if let Some(t) = tape.as_deref_mut() {
                                t.records.push(Record::Dropout { mask });
                            }
                        }
                        None => {
                            if let Some(t) = tape.as_deref_mut() {
                                t.records.push(Record::Dropout {
                                    mask: vec![T::one(); x.len()],
                                });
                            }
                        }
                    }
                    x
                }
                // The head is applied by the loss / predictive code.
                LayerKind::Softmax => x,
            };
        }
        if reaches_head && x.rank() != 2 {
            let (rows, width, _) = ops::dense_rows(x.shape())?;
            x = x.reshape(vec![rows, width])?;
        }
        Ok(x)
    }
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(Error::shape(
            "spatial layer",
            format!("expected [N, H, W, C], got {shape:?}"),
        )),
    }
}

/// Per-example input shape of every layer, validating the manifest.
fn infer_shapes(input: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input.len() != 3 || input.contains(&0) {
        return Err(Error::shape("network", format!("bad input shape {input:?}")));
    }
    let mut shapes = Vec::with_capacity(layers.len());
    let mut cur = input.to_vec();
    for spec in layers {
        spec.validate()?;
        shapes.push(cur.clone());
        cur = match spec.kind {
            LayerKind::Convolution => {
                let k = spec.kernel_size.unwrap_or(1);
                if cur.len() != 3 || cur[0] < k || cur[1] < k {
                    return Err(Error::shape(
                        "network",
                        format!("{}: {k}x{k} kernel on {cur:?}", spec.name),
                    ));
                }
                vec![cur[0] - k + 1, cur[1] - k + 1, spec.output_channels_or_nodes]
            }
            LayerKind::AveragePool => {
                if cur.len() != 3 || !cur[0].is_multiple_of(2) || !cur[1].is_multiple_of(2) {
                    return Err(Error::shape("network", format!("{}: cannot pool {cur:?}", spec.name)));
                }
                vec![cur[0] / 2, cur[1] / 2, cur[2]]
            }
            LayerKind::Dense => vec![spec.output_channels_or_nodes],
            LayerKind::Dropout | LayerKind::Softmax => cur,
        };
    }
    Ok(shapes)
}
