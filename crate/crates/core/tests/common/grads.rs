//! Gradient-check cases; each returns the relative error against central differences.

use candle_core::{DType, Device, Tensor};
use m2dino::backbone::{gate, MoeBlock};
use m2dino::heads::{detect_encode, BoundingBox};
use m2dino::nn::ParamStore;
use m2dino::objectives::{self, one_hot};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{f64_var, grad_rel_error};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()
}

pub fn dice() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = f64_var(randn(&mut rng, 2 * 3 * 4 * 4, 2.0), &[2, 3, 4, 4]);
    let ids: Vec<u8> = (0..32).map(|_| rng.random_range(0..3)).collect();
    let target = one_hot(&ids, 2, 3, 4, 4, DType::F64).unwrap();
    grad_rel_error(&logits, &|| objectives::dice_loss_from_logits(&logits, &target).unwrap(), H)
}

pub fn cross_entropy() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = f64_var(randn(&mut rng, 12, 3.0), &[3, 4]);
    grad_rel_error(&logits, &|| objectives::cross_entropy_loss(&logits, &[0, 3, 1]).unwrap(), H)
}

pub fn focal() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = detect_encode(&BoundingBox::new(0.4, 0.55, 0.5, 0.6), 4, 4).unwrap();
    let target = Tensor::from_vec(t.heatmap.clone(), (1, 16), &Device::Cpu).unwrap();
    let logits = f64_var(randn(&mut rng, 16, 2.0), &[1, 16]);
    grad_rel_error(
        &logits,
        &|| objectives::heatmap_focal(&logits, &target).unwrap().sum_all().unwrap(),
        H,
    )
}

/// Residuals on both sides of the quadratic/linear switch.
pub fn smooth_l1() -> f64 {
    let pred = f64_var(vec![0.2, -0.4, 1.7, -2.5, 0.05, 3.0], &[2, 3]);
    let target = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
    grad_rel_error(&pred, &|| objectives::smooth_l1(&pred, &target).unwrap(), H)
}

pub fn detection() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let targets = vec![
        detect_encode(&BoundingBox::new(0.3, 0.6, 0.4, 0.3), 3, 3).unwrap(),
        detect_encode(&BoundingBox::new(0.8, 0.2, 0.2, 0.3), 3, 3).unwrap(),
    ];
    let logits = f64_var(randn(&mut rng, 2 * 5 * 9, 1.5), &[2, 5, 3, 3]);
    grad_rel_error(&logits, &|| objectives::detection_loss(&logits, &targets).unwrap(), H)
}

/// Worst error over the token, task and weight inputs of the gate.
pub fn gating() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = f64_var(randn(&mut rng, 2 * 3 * 4, 1.0), &[2, 3, 4]);
    let task = f64_var(randn(&mut rng, 3, 1.0), &[3]);
    let w = f64_var(randn(&mut rng, 5 * 7, 1.0), &[5, 7]);
    let probe = Tensor::from_vec(randn(&mut rng, 2 * 3 * 5, 1.0), (2, 3, 5), &Device::Cpu).unwrap();
    let f = || gate(&h, &task, &w).unwrap().mul(&probe).unwrap().sum_all().unwrap();
    [&h, &task, &w].iter().map(|v| grad_rel_error(v, &f, H)).fold(0.0, f64::max)
}

/// Worst error over tokens, task embedding, gate weight and an expert weight.
pub fn mixture() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new(7, DType::F64);
    let block = MoeBlock::new(&mut store, 1, 4, 3, 3).unwrap();
    let h = f64_var(randn(&mut rng, 2 * 4, 1.0), &[1, 2, 4]);
    let task = f64_var(randn(&mut rng, 3, 1.0), &[3]);
    let probe = Tensor::from_vec(randn(&mut rng, 8, 1.0), (1, 2, 4), &Device::Cpu).unwrap();
    let f = || block.forward(&h, &task).unwrap().mul(&probe).unwrap().sum_all().unwrap();
    let gate_w = store.get("moe.layer.1.gate.weight").unwrap().clone();
    let expert_w = store.get("moe.layer.1.expert.2.fc1.weight").unwrap().clone();
    [&h, &task, &gate_w, &expert_w]
        .iter()
        .map(|v| grad_rel_error(v, &f, H))
        .fold(0.0, f64::max)
}

pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("dice", dice()),
        ("cross_entropy", cross_entropy()),
        ("focal", focal()),
        ("smooth_l1", smooth_l1()),
        ("detection", detection()),
        ("gating", gating()),
        ("mixture", mixture()),
    ]
}
