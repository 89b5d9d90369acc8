//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod grads;

use candle_core::{DType, Device, Tensor, Var};
use m2dino::backbone::EncoderConfig;
use m2dino::heads::{BoundingBox, SegmentationHeadConfig};
use m2dino::trainer::{ModelConfig, OptimizerConfig};

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)` for the gradient
/// of `f` with respect to `var`, by central differences with step `h`.
pub fn grad_rel_error(var: &Var, f: &dyn Fn() -> Tensor, h: f64) -> f64 {
    let loss = f();
    let grads = loss.backward().unwrap();
    let analytic: Vec<f64> = grads
        .get(var)
        .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
        .unwrap_or_else(|| vec![0.0; var.elem_count()]);
    let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let shape = var.shape().clone();
    let eval = |values: &[f64]| {
        var.set(&Tensor::from_vec(values.to_vec(), shape.clone(), &Device::Cpu).unwrap())
            .unwrap();
        f().to_scalar::<f64>().unwrap()
    };
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] = base[i] + h;
        let up = eval(&x);
        x[i] = base[i] - h;
        let down = eval(&x);
        numeric.push((up - down) / (2.0 * h));
    }
    eval(&base);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn f64_var(values: Vec<f64>, shape: &[usize]) -> Var {
    Var::from_tensor(&Tensor::from_vec(values, shape, &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap()).unwrap()
}

/// Boundary pixels by the textbook definition.
pub fn boundary(m: &[bool], h: usize, w: usize) -> Vec<(i64, i64)> {
    let at = |r: i64, c: i64| r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && m[r as usize * w + c as usize];
    let mut out = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if at(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !at(r + dr, c + dc)) {
                out.push((r, c));
            }
        }
    }
    out
}

/// Symmetric Hausdorff distance by exhaustive search, with the empty-mask
/// conventions (both empty: 0, one empty: image diagonal).
pub fn hausdorff_oracle(a: &[bool], b: &[bool], h: usize, w: usize) -> f64 {
    let (ba, bb) = (boundary(a, h, w), boundary(b, h, w));
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return (((h - 1).pow(2) + (w - 1).pow(2)) as f64).sqrt(),
        _ => {}
    }
    let directed = |x: &[(i64, i64)], y: &[(i64, i64)]| {
        x.iter()
            .map(|p| {
                y.iter()
                    .map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    directed(&ba, &bb).max(directed(&bb, &ba))
}

pub fn dsc_oracle(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// IoU by interval arithmetic on the clamped corners.
pub fn iou_oracle(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let c = |v: f64| v.clamp(0.0, 1.0);
    let ints = |x: &BoundingBox| {
        (
            c(x.cx - x.bw / 2.0),
            c(x.cx + x.bw / 2.0),
            c(x.cy - x.bh / 2.0),
            c(x.cy + x.bh / 2.0),
        )
    };
    let (ax0, ax1, ay0, ay1) = ints(a);
    let (bx0, bx1, by0, by1) = ints(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Fraction of (positive, negative) pairs ranked correctly, ties half.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            den += 1.0;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

/// Small encoder and decoder sized for CPU runs on 112-pixel inputs.
pub fn desk_model(image_size: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size,
            patch_size: 16,
            embed_dim: 64,
            depth: 12,
            num_heads: 4,
            moe_layers: (7..=12).collect(),
            num_experts: 4,
            task_embed_dim: 16,
            moe_enabled: true,
        },
        segmentation: SegmentationHeadConfig {
            tap_layers: [3, 6, 9, 12],
            fusion_dim: 32,
            head_dim: 16,
        },
        ..ModelConfig::default()
    }
}

pub fn desk_optimizer(epochs: usize) -> OptimizerConfig {
    OptimizerConfig {
        epochs,
        batch_size: 8,
        base_lr: 1e-3,
        weight_decay: 1e-4,
        backbone_lr: 5e-4,
        decoder_lr: 2e-3,
        moe_lr: 1e-3,
        head_lr: 2e-3,
        lr_grid: vec![5e-4],
        lr_search: false,
        grad_clip: Some(1.0),
    }
}

/// Minimal model for fast plumbing tests on 32-pixel inputs.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 16,
            depth: 4,
            num_heads: 2,
            moe_layers: [3, 4].into_iter().collect(),
            num_experts: 2,
            task_embed_dim: 4,
            moe_enabled: true,
        },
        segmentation: SegmentationHeadConfig {
            tap_layers: [1, 2, 3, 4],
            fusion_dim: 8,
            head_dim: 4,
        },
        ..ModelConfig::default()
    }
}
