//! Finite-difference gradient oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fogal::bayes::build_lenet;
use fogal::nn::{softmax_cross_entropy_batch, DropoutMode, LayerSpec, Scalar, Sequential, Tensor};

pub fn loss<T: Scalar>(
    net: &Sequential<T>,
    x: &Tensor<T>,
    labels: &[usize],
    masks: &[fogal::nn::DropoutMask<T>],
) -> f64 {
    let logits = net.forward(x, DropoutMode::Shared(masks)).unwrap();
    softmax_cross_entropy_batch(&logits, labels).unwrap().0.as_f64()
}

pub fn analytic<T: Scalar>(
    net: &Sequential<T>,
    x: &Tensor<T>,
    labels: &[usize],
    masks: &[fogal::nn::DropoutMask<T>],
) -> Vec<Tensor<T>> {
    let (logits, tape) = net.forward_recorded(x, DropoutMode::Shared(masks)).unwrap();
    let (_, _, grad) = softmax_cross_entropy_batch(&logits, labels).unwrap();
    net.backward(tape, &grad).unwrap()
}

/// Norm-wise relative error between two gradient vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb < 1e-12 {
        0.0
    } else {
        diff / (na + nb)
    }
}

pub fn central_difference(
    net: &Sequential<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    masks: &[fogal::nn::DropoutMask<f64>],
    param: usize,
    coords: &[usize],
) -> Vec<f64> {
    let h = 1e-6;
    coords
        .iter()
        .map(|&i| {
            let mut plus = net.clone();
            plus.params_mut()[param].data_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[param].data_mut()[i] -= h;
            (loss(&plus, x, labels, masks) - loss(&minus, x, labels, masks)) / (2.0 * h)
        })
        .collect()
}

/// Largest per-tensor relative error between backprop and central
/// differences, all in `f64`.
pub fn network_error(input: [usize; 3], layers: Vec<LayerSpec>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Sequential::<f64>::new(input, layers, &mut rng).unwrap();
    let batch = 3;
    let len: usize = input.iter().product::<usize>() * batch;
    let mut shape = vec![batch];
    shape.extend_from_slice(&input);
    let x = Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let classes = net.num_classes();
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    let masks = net.sample_masks(&mut rng).unwrap();
    let grads = analytic(&net, &x, &labels, &masks);
    let mut worst: f64 = 0.0;
    for (p, g) in grads.iter().enumerate() {
        let coords: Vec<usize> = (0..g.len()).collect();
        let numeric = central_difference(&net, &x, &labels, &masks, p, &coords);
        worst = worst.max(rel_err(g.data(), &numeric));
    }
    worst
}

/// Largest relative error of `f32` backprop through LeNet against `f64`
/// central differences on sampled coordinates.
pub fn lenet_error(seed: u64) -> f64 {
    let model = build_lenet(0.25, 0.5, seed).unwrap();
    let net32 = &model.net;
    let net64: Sequential<f64> = net32.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let batch = 2;
    let pixels: Vec<f64> = (0..batch * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
    let x64 = Tensor::new(vec![batch, 32, 32, 1], pixels).unwrap();
    let x32: Tensor<f32> = x64.cast();
    let labels = vec![3, 7];
    let masks64 = net64.sample_masks(&mut rng).unwrap();
    let masks32: Vec<_> = masks64
        .iter()
        .map(|m| fogal::nn::DropoutMask {
            mask: m.mask.cast(),
            rate: m.rate,
            scale: m.scale as f32,
        })
        .collect();
    let grads = analytic(net32, &x32, &labels, &masks32);
    let mut worst: f64 = 0.0;
    for (p, g) in grads.iter().enumerate() {
        let n = g.len().min(40);
        let coords: Vec<usize> = rand::seq::index::sample(&mut rng, g.len(), n).into_vec();
        let numeric = central_difference(&net64, &x64, &labels, &masks64, p, &coords);
        let a: Vec<f64> = coords.iter().map(|&i| g.data()[i] as f64).collect();
        worst = worst.max(rel_err(&a, &numeric));
    }
    worst
}
