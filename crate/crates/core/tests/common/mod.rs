#![allow(dead_code)]

pub mod gradcheck;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fogal::config::ExperimentConfig;
use fogal::dataset::{load_mnist, mnist_dir, Dataset, Mnist, NUM_CLASSES};
use fogal::nn::Tensor;

/// Random images whose brightness pattern depends on the class, so a few
/// epochs are enough to get above chance.
pub fn synthetic(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
    let mut data = Vec::with_capacity(n * 1024);
    for &l in &labels {
        for p in 0..1024 {
            let row = p / 32;
            let base = if row / 3 == l { 0.8 } else { 0.1 };
            data.push((base + rng.gen_range(-0.1f32..0.1)).clamp(0.0, 1.0));
        }
    }
    Dataset::new(Tensor::new(vec![n, 32, 32, 1], data).unwrap(), labels).unwrap()
}

/// A small, fast configuration for synthetic data.
pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        n_devices: 2,
        acquisitions: 2,
        pool_size: 20,
        acquire_k: 2,
        m_init: 10,
        mc_samples: 2,
        epochs: 1,
        fog_reserve: 40,
        validation_size: 20,
        test_size: 30,
        ..ExperimentConfig::default()
    }
}

pub fn mnist() -> Option<Mnist> {
    let dir: PathBuf = mnist_dir(None);
    let dir = if dir.is_relative() {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(dir)
    } else {
        dir
    };
    match load_mnist(&dir) {
        Ok(m) => Some(m),
        Err(e) => {
            eprintln!("MNIST unavailable ({e}); skipping");
            None
        }
    }
}
