#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use kq_core::tensor::{LayerKind, ModelArchive, WeightTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect()
}

pub fn conv(name: &str, omega: usize, p: usize, q: usize, seed: u64) -> WeightTensor {
    WeightTensor::conv(name, omega, p, q, normal(omega * omega * p * q, seed)).unwrap()
}

pub fn fc(name: &str, rows: usize, cols: usize, seed: u64) -> WeightTensor {
    WeightTensor::new(
        name,
        LayerKind::FullyConnected,
        vec![rows, cols],
        normal(rows * cols, seed),
    )
    .unwrap()
}

/// Two 3×3 convs, a 1×1 conv and a classifier.
pub fn four_layer_model() -> ModelArchive {
    ModelArchive::new(vec![
        conv("conv1", 3, 3, 16, 1),
        conv("conv2", 3, 16, 16, 2),
        conv("proj", 1, 16, 8, 3),
        fc("fc", 10, 32, 4),
    ])
    .unwrap()
}

pub fn kq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kq"))
        .args(args)
        .env("KQ_LOG", "error")
        .output()
        .expect("spawn kq")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
