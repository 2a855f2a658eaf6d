//! Batched layer kernels. Spatial tensors are `[N, H, W, C]` (a rank-3
//! `[H, W, C]` input is treated as a batch of one), convolution kernels are
//! `[kh, kw, C, F]` and dense weights are `[inputs, outputs]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub(crate) fn apply<T: Scalar>(self, values: &mut [T]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => values.iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = T::zero()
                }
            }),
            Activation::Tanh => values.iter_mut().for_each(|v| *v = v.tanh()),
        }
    }

    /// Multiplies `grad` in place by the derivative, expressed through the
    /// activation's output.
    pub(crate) fn backprop<T: Scalar>(self, output: &[T], grad: &mut [T]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => {
                for (g, &o) in grad.iter_mut().zip(output) {
                    if o <= T::zero() {
                        *g = T::zero();
                    }
                }
            }
            Activation::Tanh => {
                for (g, &o) in grad.iter_mut().zip(output) {
                    *g = *g * (T::one() - o * o);
                }
            }
        }
    }
}

/// Per-unit multiplicative dropout mask with inverted scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T = f32> {
    /// Entries are `0` (dropped) or `scale` (kept).
    pub mask: Tensor<T>,
    pub rate: f64,
    pub scale: T,
}

impl<T: Scalar> DropoutMask<T> {
    pub fn sample<R: Rng + ?Sized>(shape: Vec<usize>, rate: f64, rng: &mut R) -> Result<Self> {
        check_rate(rate)?;
        let scale = T::lit(1.0 / (1.0 - rate));
        let len: usize = shape.iter().product();
        let data = if rate == 0.0 {
            vec![scale; len]
        } else {
            (0..len)
                .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { scale })
                .collect()
        };
        Ok(Self {
            mask: Tensor::from_parts(shape, data),
            rate,
            scale,
        })
    }

    pub fn kept_fraction(&self) -> f64 {
        let kept = self.mask.data().iter().filter(|&&m| m != T::zero()).count();
        kept as f64 / self.mask.len() as f64
    }
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Splits a spatial tensor into `(batched, [N, H, W, C])`.
fn spatial_dims(op: &'static str, shape: &[usize]) -> Result<(bool, [usize; 4])> {
    match *shape {
        [h, w, c] => Ok((false, [1, h, w, c])),
        [n, h, w, c] => Ok((true, [n, h, w, c])),
        _ => Err(Error::shape(
            op,
            format!("expected [H, W, C] or [N, H, W, C], got {shape:?}"),
        )),
    }
}

fn restore_rank(batched: bool, dims: [usize; 4]) -> Vec<usize> {
    if batched {
        dims.to_vec()
    } else {
        dims[1..].to_vec()
    }
}

/// Unrolls valid, unit-stride patches into a `[N*OH*OW, kh*kw*C]` matrix.
pub(crate) fn im2col<T: Scalar>(input: &[T], dims: [usize; 4], kh: usize, kw: usize) -> Vec<T> {
    let [n, h, w, c] = dims;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let k = kh * kw * c;
    let mut cols = vec![T::zero(); n * oh * ow * k];
    let mut row = 0;
    for b in 0..n {
        let image = &input[b * h * w * c..(b + 1) * h * w * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut cols[row * k..(row + 1) * k];
                for ky in 0..kh {
                    let src = ((oy + ky) * w + ox) * c;
                    let len = kw * c;
                    dst[ky * len..(ky + 1) * len].copy_from_slice(&image[src..src + len]);
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input.
pub(crate) fn col2im<T: Scalar>(cols: &[T], dims: [usize; 4], kh: usize, kw: usize) -> Vec<T> {
    let [n, h, w, c] = dims;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let k = kh * kw * c;
    let mut out = vec![T::zero(); n * h * w * c];
    let mut row = 0;
    for b in 0..n {
        let image = &mut out[b * h * w * c..(b + 1) * h * w * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let src = &cols[row * k..(row + 1) * k];
                for ky in 0..kh {
                    let dst = ((oy + ky) * w + ox) * c;
                    let len = kw * c;
                    for (d, &s) in image[dst..dst + len].iter_mut().zip(&src[ky * len..(ky + 1) * len]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
    out
}

pub(crate) struct ConvGeometry {
    pub dims: [usize; 4],
    pub kh: usize,
    pub kw: usize,
    pub filters: usize,
}

impl ConvGeometry {
    pub fn out_dims(&self) -> [usize; 4] {
        let [n, h, w, _] = self.dims;
        [n, h - self.kh + 1, w - self.kw + 1, self.filters]
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.dims[3]
    }
}

fn conv_geometry(input: &[usize], kernels: &[usize], bias: &[usize]) -> Result<(bool, ConvGeometry)> {
    let (batched, dims) = spatial_dims("conv2d", input)?;
    let [kh, kw, kc, f] = match *kernels {
        [a, b, c, d] => [a, b, c, d],
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernels must be [kh, kw, C, F], got {kernels:?}"),
            ))
        }
    };
    if kc != dims[3] {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, kernels expect {kc}", dims[3]),
        ));
    }
    if kh > dims[1] || kw > dims[2] {
        return Err(Error::shape(
            "conv2d",
            format!("{kh}x{kw} kernel exceeds {}x{} input", dims[1], dims[2]),
        ));
    }
    if bias != [f] {
        return Err(Error::shape("conv2d", format!("bias must be [{f}], got {bias:?}")));
    }
    Ok((
        batched,
        ConvGeometry {
            dims,
            kh,
            kw,
            filters: f,
        },
    ))
}

/// `out[rows, F] = cols[rows, K] * W[K, F] + b`, then the activation.
pub(crate) fn affine_rows<T: Scalar>(
    rows: usize,
    inputs: &[T],
    k: usize,
    weights: &[T],
    bias: &[T],
    activation: Activation,
) -> Vec<T> {
    let f = bias.len();
    let mut out = Vec::with_capacity(rows * f);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    T::gemm(
        rows,
        k,
        f,
        inputs,
        k as isize,
        1,
        weights,
        f as isize,
        1,
        T::one(),
        &mut out,
        f as isize,
        1,
    );
    activation.apply(&mut out);
    out
}

/// Gradients of an affine map given `grad_out` already multiplied by the
/// activation derivative. Returns `(d_weights, d_bias, d_inputs)`; the input
/// gradient is skipped when `need_input` is false.
pub(crate) fn affine_rows_backward<T: Scalar>(
    rows: usize,
    inputs: &[T],
    k: usize,
    weights: &[T],
    grad_out: &[T],
    f: usize,
    need_input: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let mut d_weights = vec![T::zero(); k * f];
    // inputs^T [K, rows] * grad_out [rows, F]
    T::gemm(
        k,
        rows,
        f,
        inputs,
        1,
        k as isize,
        grad_out,
        f as isize,
        1,
        T::zero(),
        &mut d_weights,
        f as isize,
        1,
    );
    let mut d_bias = vec![T::zero(); f];
    for row in grad_out.chunks_exact(f) {
        for (d, &g) in d_bias.iter_mut().zip(row) {
            *d += g;
        }
    }
    let d_inputs = need_input.then(|| {
        let mut d = vec![T::zero(); rows * k];
        // grad_out [rows, F] * weights^T [F, K]
        T::gemm(
            rows,
            f,
            k,
            grad_out,
            f as isize,
            1,
            weights,
            1,
            f as isize,
            T::zero(),
            &mut d,
            k as isize,
            1,
        );
        d
    });
    (d_weights, d_bias, d_inputs)
}

/// Valid, unit-stride cross-correlation.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (batched, geom) = conv_geometry(input.shape(), kernels.shape(), bias.shape())?;
    let out_dims = geom.out_dims();
    let cols = im2col(input.data(), geom.dims, geom.kh, geom.kw);
    let rows = out_dims[0] * out_dims[1] * out_dims[2];
    let out = affine_rows(
        rows,
        &cols,
        geom.patch_len(),
        kernels.data(),
        bias.data(),
        Activation::Identity,
    );
    Ok(Tensor::from_parts(restore_rank(batched, out_dims), out))
}

pub(crate) fn conv2d_forward_cached<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    activation: Activation,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (_, geom) = conv_geometry(input.shape(), kernels.shape(), bias.shape())?;
    let out_dims = geom.out_dims();
    let cols = im2col(input.data(), geom.dims, geom.kh, geom.kw);
    let rows = out_dims[0] * out_dims[1] * out_dims[2];
    let out = affine_rows(rows, &cols, geom.patch_len(), kernels.data(), bias.data(), activation);
    Ok((Tensor::from_parts(out_dims.to_vec(), out), cols))
}

/// Backward pass of a convolution whose forward cached `cols`.
/// `grad_out` must already include the activation derivative.
pub(crate) fn conv2d_backward<T: Scalar>(
    input_dims: [usize; 4],
    cols: &[T],
    kernels: &Tensor<T>,
    grad_out: &[T],
    need_input: bool,
) -> (Tensor<T>, Tensor<T>, Option<Vec<T>>) {
    let ks = kernels.shape();
    let (kh, kw, f) = (ks[0], ks[1], ks[3]);
    let geom = ConvGeometry {
        dims: input_dims,
        kh,
        kw,
        filters: f,
    };
    let od = geom.out_dims();
    let rows = od[0] * od[1] * od[2];
    let k = geom.patch_len();
    let (dw, db, dcols) = affine_rows_backward(rows, cols, k, kernels.data(), grad_out, f, need_input);
    let d_input = dcols.map(|dc| col2im(&dc, input_dims, kh, kw));
    (
        Tensor::from_parts(ks.to_vec(), dw),
        Tensor::from_parts(vec![f], db),
        d_input,
    )
}

/// 2x2 mean pooling with stride 2.
pub fn avgpool2x2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (batched, dims) = spatial_dims("avgpool2x2", input.shape())?;
    let [n, h, w, c] = dims;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "avgpool2x2",
            format!("spatial extents must be even, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let src = input.data();
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((b * oh + oy) * ow + ox) * c;
                let i00 = ((b * h + 2 * oy) * w + 2 * ox) * c;
                let i01 = i00 + c;
                let i10 = i00 + w * c;
                let i11 = i10 + c;
                for ch in 0..c {
                    out[o + ch] = (src[i00 + ch] + src[i01 + ch] + src[i10 + ch] + src[i11 + ch]) * quarter;
                }
            }
        }
    }
    Ok(Tensor::from_parts(restore_rank(batched, [n, oh, ow, c]), out))
}

pub(crate) fn avgpool2x2_backward<T: Scalar>(input_dims: [usize; 4], grad_out: &[T]) -> Vec<T> {
    let [n, h, w, c] = input_dims;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((b * oh + oy) * ow + ox) * c;
                let i00 = ((b * h + 2 * oy) * w + 2 * ox) * c;
                for ch in 0..c {
                    let g = grad_out[o + ch] * quarter;
                    out[i00 + ch] = g;
                    out[i00 + c + ch] = g;
                    out[i00 + w * c + ch] = g;
                    out[i00 + w * c + c + ch] = g;
                }
            }
        }
    }
    out
}

/// Affine map `x * W + b`. Accepts `[n]` or `[N, ...]` inputs; trailing axes
/// of a batched input are flattened.
pub fn dense_forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, n, batched) = dense_rows(input.shape())?;
    check_dense(n, weights.shape(), bias.shape())?;
    let m = bias.len();
    let out = affine_rows(rows, input.data(), n, weights.data(), bias.data(), Activation::Identity);
    let shape = if batched { vec![rows, m] } else { vec![m] };
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn dense_rows(shape: &[usize]) -> Result<(usize, usize, bool)> {
    match shape {
        [n] => Ok((1, *n, false)),
        [rows, rest @ ..] if !rest.is_empty() => Ok((*rows, rest.iter().product(), true)),
        _ => Err(Error::shape("dense", format!("bad input shape {shape:?}"))),
    }
}

pub(crate) fn check_dense(n: usize, weights: &[usize], bias: &[usize]) -> Result<()> {
    match *weights {
        [wn, wm] if wn == n && bias == [wm] => Ok(()),
        _ => Err(Error::shape(
            "dense",
            format!("input width {n} does not fit weights {weights:?} / bias {bias:?}"),
        )),
    }
}

/// Samples a fresh per-element mask and applies it.
pub fn dropout_apply<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, DropoutMask<T>)> {
    let mask = DropoutMask::sample(input.shape().to_vec(), rate, rng)?;
    let out = input
        .data()
        .iter()
        .zip(mask.mask.data())
        .map(|(&x, &m)| x * m)
        .collect();
    Ok((Tensor::from_parts(input.shape().to_vec(), out), mask))
}

/// Numerically stable softmax of one logit row, computed in `f64`.
pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn softmax_row<T: Scalar>(logits: &[T], out: &mut [T]) -> T {
    let max = logits.iter().cloned().fold(T::neg_infinity(), |a, b| a.max(b));
    let mut sum = T::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
    max + sum.ln()
}

/// Single-example softmax plus negative log-likelihood.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 1 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("expected [C], got {:?}", logits.shape()),
        ));
    }
    let c = logits.len();
    if c < 2 {
        return Err(Error::InvalidArgument("softmax needs at least 2 classes".into()));
    }
    if label >= c {
        return Err(Error::OutOfRange {
            what: "class label",
            index: label,
            len: c,
        });
    }
    let mut probs = vec![T::zero(); c];
    let log_norm = softmax_row(logits.data(), &mut probs);
    let loss = log_norm - logits.data()[label];
    Ok((loss, Tensor::from_parts(vec![c], probs)))
}

/// Batched head: mean loss over the batch, probabilities, and the gradient
/// of the mean loss with respect to the logits.
pub fn softmax_cross_entropy_batch<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    let [n, c] = match *logits.shape() {
        [n, c] => [n, c],
        _ => {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("expected [N, C], got {:?}", logits.shape()),
            ))
        }
    };
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{n} logit rows but {} labels", labels.len()),
        ));
    }
    if c < 2 {
        return Err(Error::InvalidArgument("softmax needs at least 2 classes".into()));
    }
    let mut probs = vec![T::zero(); n * c];
    let mut grad = vec![T::zero(); n * c];
    let mut total = T::zero();
    let inv_n = T::one() / T::lit(n as f64);
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::OutOfRange {
                what: "class label",
                index: label,
                len: c,
            });
        }
        let row = &logits.data()[i * c..(i + 1) * c];
        let p = &mut probs[i * c..(i + 1) * c];
        let log_norm = softmax_row(row, p);
        total += log_norm - row[label];
        let g = &mut grad[i * c..(i + 1) * c];
        for (j, (gj, &pj)) in g.iter_mut().zip(p.iter()).enumerate() {
            let target = if j == label { T::one() } else { T::zero() };
            *gj = (pj - target) * inv_n;
        }
    }
    Ok((
        total * inv_n,
        Tensor::from_parts(vec![n, c], probs),
        Tensor::from_parts(vec![n, c], grad),
    ))
}

/// Plain gradient descent: `p <- p - lr * g`.
pub fn sgd_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: T) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} parameters, {} gradients", params.len(), grads.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv = *pv - lr * gv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_shape_lenet_first_layer() {
        let x = Tensor::<f32>::zeros(vec![32, 32, 1]);
        let k = Tensor::<f32>::zeros(vec![5, 5, 1, 6]);
        let b = Tensor::<f32>::zeros(vec![6]);
        assert_eq!(conv2d_forward(&x, &k, &b).unwrap().shape(), &[28, 28, 6]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[3, 2, 1], &[1., -2., 3., 4., 5., 6.5]);
        let k = t(&[1, 1, 1, 1], &[1.]);
        let b = t(&[1], &[0.]);
        assert_eq!(conv2d_forward(&x, &k, &b).unwrap().data(), x.data());
    }

    #[test]
    fn conv_hand_sum() {
        let x = t(&[2, 2, 1], &[1., 2., 3., 4.]);
        let k = t(&[2, 2, 1, 1], &[1., 1., 1., 1.]);
        let b = t(&[1], &[0.]);
        let y = conv2d_forward(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.]);
    }

    #[test]
    fn conv_rejects_mismatches() {
        let x = t(&[2, 2, 1], &[1., 2., 3., 4.]);
        let big = Tensor::<f64>::zeros(vec![3, 3, 1, 1]);
        let b = t(&[1], &[0.]);
        assert!(matches!(conv2d_forward(&x, &big, &b), Err(Error::Shape { .. })));
        let wrong_c = Tensor::<f64>::zeros(vec![1, 1, 2, 1]);
        assert!(conv2d_forward(&x, &wrong_c, &b).is_err());
        let k = Tensor::<f64>::zeros(vec![1, 1, 1, 1]);
        let wrong_b = Tensor::<f64>::zeros(vec![2]);
        assert!(conv2d_forward(&x, &k, &wrong_b).is_err());
    }

    #[test]
    fn pool_cases() {
        let c = Tensor::<f64>::filled(vec![4, 6, 3], 7.0);
        let y = avgpool2x2(&c).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 7.0));

        let x = t(&[2, 2, 1], &[1., 2., 3., 4.]);
        assert_eq!(avgpool2x2(&x).unwrap().data(), &[2.5]);

        let z = Tensor::<f32>::zeros(vec![28, 28, 6]);
        assert_eq!(avgpool2x2(&z).unwrap().shape(), &[14, 14, 6]);

        let odd = Tensor::<f32>::zeros(vec![3, 4, 1]);
        assert!(avgpool2x2(&odd).is_err());
    }

    #[test]
    fn dense_cases() {
        let x = t(&[2], &[1., 2.]);
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(dense_forward(&x, &eye, &t(&[2], &[0., 0.])).unwrap().data(), &[1., 2.]);
        assert_eq!(dense_forward(&x, &eye, &t(&[2], &[1., 1.])).unwrap().data(), &[2., 3.]);
        let x = Tensor::<f32>::zeros(vec![120]);
        let w = Tensor::<f32>::zeros(vec![120, 84]);
        let b = Tensor::<f32>::zeros(vec![84]);
        assert_eq!(dense_forward(&x, &w, &b).unwrap().shape(), &[84]);
        assert!(dense_forward(&x, &w, &Tensor::<f32>::zeros(vec![83])).is_err());
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t(&[5], &[1., -2., 3., 0.5, 9.]);
        let (y, mask) = dropout_apply(&x, 0.0, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(mask.mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn dropout_seeded_and_scaled() {
        let x = Tensor::<f32>::filled(vec![64], 1.0);
        let (a, ma) = dropout_apply(&x, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (b, _) = dropout_apply(&x, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(ma.mask.data().iter().all(|&m| m == 0.0 || m == 2.0));
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let x = Tensor::<f32>::filled(vec![4], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dropout_apply(&x, 1.0, &mut rng).is_err());
        assert!(dropout_apply(&x, -0.1, &mut rng).is_err());
    }

    #[test]
    fn dropout_keep_fraction_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mask = DropoutMask::<f32>::sample(vec![100_000], 0.5, &mut rng).unwrap();
        assert!((mask.kept_fraction() - 0.5).abs() < 0.01);
    }

    #[test]
    fn softmax_cases() {
        let (loss, p) = softmax_cross_entropy(&Tensor::<f64>::zeros(vec![10]), 3).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.1).abs() < 1e-12));
        assert!((loss - 10f64.ln()).abs() < 1e-12);

        let mut big = vec![0.0f64; 10];
        big[4] = 1000.0;
        let (loss, _) = softmax_cross_entropy(&t(&[10], &big), 4).unwrap();
        assert!(loss.abs() < 1e-12);

        // -ln(e^1 / (e^1 + e^2)) = ln(1 + e)
        let (loss, _) = softmax_cross_entropy(&t(&[2], &[1., 2.]), 0).unwrap();
        assert!((loss - 1.313_261_687_518_223).abs() < 1e-12);

        assert!(softmax_cross_entropy(&t(&[2], &[1., 2.]), 2).is_err());
        assert!(softmax_cross_entropy(&t(&[1], &[1.]), 0).is_err());
    }

    #[test]
    fn sgd_cases() {
        let mut p = vec![t(&[1], &[1.0])];
        let g = vec![t(&[1], &[2.0])];
        sgd_step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p[0].data(), &[1.0]);
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert!((p[0].data()[0] - 0.8).abs() < 1e-15);
        assert!(sgd_step(&mut p, &[t(&[2], &[1., 1.])], 0.1).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let dims = [2, 5, 4, 3];
        let len: usize = dims.iter().product();
        let x: Vec<f64> = (0..len).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let cols = im2col(&x, dims, 3, 2);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, dims, 3, 2);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
