//! Task losses and the weighted multi-task objective. Every loss returns a
//! scalar tensor averaged over the batch.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::DetectionTarget;
use crate::nn;

pub const DICE_EPS: f64 = 1e-6;
/// Focal exponents: `(1 - p)^2` at peaks, `(1 - y)^4 p^2` elsewhere.
pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// One-hot encodes `(B, H, W)` class ids into `(B, C, H, W)`.
pub fn one_hot(ids: &[u8], batch: usize, classes: usize, h: usize, w: usize, dtype: DType) -> Result<Tensor> {
    if ids.len() != batch * h * w {
        return Err(Error::Shape(format!(
            "{} mask pixels for batch {batch} of {h}x{w}",
            ids.len()
        )));
    }
    let mut out = vec![0f32; batch * classes * h * w];
    for b in 0..batch {
        for p in 0..h * w {
            let c = ids[b * h * w + p] as usize;
            if c >= classes {
                return Err(Error::InvalidSample(format!("mask class {c} >= {classes}")));
            }
            out[(b * classes + c) * h * w + p] = 1.0;
        }
    }
    Ok(Tensor::from_vec(out, (batch, classes, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Soft Dice loss over foreground classes `1..C`:
/// `1 - mean_c (2 sum p y + eps) / (sum p + sum y + eps)`, averaged over the batch.
/// With a single class, that class is treated as foreground.
pub fn dice_loss(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    if probs.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "dice: probabilities {:?} vs target {:?}",
            probs.dims(),
            target.dims()
        )));
    }
    let (b, c, h, w) = probs.dims4()?;
    let (p, y) = if c > 1 {
        (probs.narrow(1, 1, c - 1)?, target.narrow(1, 1, c - 1)?)
    } else {
        (probs.clone(), target.clone())
    };
    let fg = p.dim(1)?;
    let p = p.reshape((b, fg, h * w))?;
    let y = y.reshape((b, fg, h * w))?;
    let inter = (p.mul(&y)?.sum(D::Minus1)? * 2.0)?;
    let denom = (p.sum(D::Minus1)? + y.sum(D::Minus1)?)?;
    let dice = ((inter + DICE_EPS)? / (denom + DICE_EPS)?)?;
    Ok((1.0 - dice.mean_all()?)?)
}

/// Dice loss from logits, via a softmax over the class dimension.
pub fn dice_loss_from_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let probs = nn::softmax_last(&logits.permute((0, 2, 3, 1))?)?.permute((0, 3, 1, 2))?;
    dice_loss(&probs, target)
}

/// Mean negative log-softmax probability of each sample's class.
pub fn cross_entropy_loss(logits: &Tensor, classes: &[usize]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if c < 2 {
        return Err(Error::Config(format!("cross-entropy needs >= 2 classes, got {c}")));
    }
    if classes.len() != b {
        return Err(Error::Shape(format!("{} labels for batch {b}", classes.len())));
    }
    if let Some(bad) = classes.iter().find(|&&k| k >= c) {
        return Err(Error::InvalidSample(format!("class {bad} out of range for {c} classes")));
    }
    let mut mask = vec![0f32; b * c];
    for (i, &k) in classes.iter().enumerate() {
        mask[i * c + k] = 1.0;
    }
    let mask = Tensor::from_vec(mask, (b, c), logits.device())?.to_dtype(logits.dtype())?;
    let logp = nn::log_softmax_last(logits)?;
    Ok((logp.mul(&mask)?.sum_all()? * (-1.0 / b as f64))?)
}

/// Mean `|pred - target|`.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!("l1: {:?} vs {:?}", pred.dims(), target.dims())));
    }
    Ok(pred.sub(target)?.abs()?.mean_all()?)
}

/// Elementwise Smooth L1 with transition point 1, summed.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let r = pred.sub(target)?;
    let a = r.abs()?;
    let quad = (r.sqr()? * (0.5 / SMOOTH_L1_BETA))?;
    let lin = (&a - 0.5 * SMOOTH_L1_BETA)?;
    let small = a.lt(SMOOTH_L1_BETA)?;
    Ok(small.where_cond(&quad, &lin)?.sum_all()?)
}

/// Penalty-reduced heatmap focal loss on logits `(B, h*w)` against Gaussian
/// targets; per-image sums normalized by the number of peak cells.
/// Returns the per-image values `(B,)`.
pub fn heatmap_focal(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let p = nn::sigmoid(logits)?;
    let log_p = nn::softplus(&logits.neg()?)?.neg()?;
    let log_not_p = nn::softplus(logits)?.neg()?;
    let pos = target.ge(1.0 - 1e-12)?;
    let pos_f = pos.to_dtype(logits.dtype())?;
    let pos_term = (1.0 - &p)?.sqr()?.mul(&log_p)?;
    let neg_weight = (1.0 - target)?.sqr()?.sqr()?;
    let neg_term = neg_weight.mul(&p.sqr()?)?.mul(&log_not_p)?;
    let per_cell = pos.where_cond(&pos_term, &neg_term)?;
    let num_pos = pos_f.sum(D::Minus1)?.clamp(1.0, f64::INFINITY)?;
    Ok((per_cell.sum(D::Minus1)?.neg()? / num_pos)?)
}

/// Focal term plus Smooth L1 on the activated box channels at each target's
/// center cell; mean over the batch. `logits` is `(B, 5, h, w)`.
pub fn detection_loss(logits: &Tensor, targets: &[DetectionTarget]) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if c != 5 {
        return Err(Error::Shape(format!("detection logits need 5 channels, got {c}")));
    }
    if targets.len() != b {
        return Err(Error::Shape(format!("{} targets for batch {b}", targets.len())));
    }
    let dev = logits.device();
    let dtype = logits.dtype();
    let mut heat = Vec::with_capacity(b * h * w);
    let mut cell_mask = vec![0f64; b * h * w];
    let mut reg = Vec::with_capacity(b * 4);
    for (i, t) in targets.iter().enumerate() {
        if t.rows != h || t.cols != w || t.heatmap.len() != h * w {
            return Err(Error::Shape(format!(
                "target grid {}x{} vs prediction {h}x{w}",
                t.rows, t.cols
            )));
        }
        let (r, col) = t.cell;
        if r >= h || col >= w {
            return Err(Error::InvalidSample(format!("target cell {:?} outside grid", t.cell)));
        }
        heat.extend_from_slice(&t.heatmap);
        cell_mask[i * h * w + r * w + col] = 1.0;
        reg.extend_from_slice(&t.regression);
    }
    let heat = Tensor::from_vec(heat, (b, h * w), dev)?.to_dtype(dtype)?;
    let cell_mask = Tensor::from_vec(cell_mask, (b, 1, h * w), dev)?.to_dtype(dtype)?;
    let reg = Tensor::from_vec(reg, (b, 4), dev)?.to_dtype(dtype)?;

    let flat = logits.reshape((b, 5, h * w))?;
    let focal = heatmap_focal(&flat.narrow(1, 0, 1)?.squeeze(1)?, &heat)?.sum_all()?;
    let boxes = nn::sigmoid(&flat.narrow(1, 1, 4)?)?;
    let at_cell = boxes.broadcast_mul(&cell_mask)?.sum(D::Minus1)?;
    let box_term = smooth_l1(&at_cell, &reg)?;
    Ok(((focal + box_term)? / b as f64)?)
}

/// Balancing coefficients; tasks without an entry weigh 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub BTreeMap<String, f64>);

impl LossWeights {
    pub fn weight(&self, task: &str) -> f64 {
        self.0.get(task).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        match self.0.iter().find(|(_, w)| !(**w >= 0.0) || !w.is_finite()) {
            Some((t, w)) => Err(Error::Config(format!("loss weight for `{t}` is {w}"))),
            None => Ok(()),
        }
    }
}

/// `sum_t lambda_t * L_t`.
pub fn multi_task_loss(losses: &BTreeMap<String, Tensor>, weights: &LossWeights) -> Result<Tensor> {
    weights.validate()?;
    let mut total: Option<Tensor> = None;
    for (task, loss) in losses {
        let term = (loss * weights.weight(task))?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    total.ok_or_else(|| Error::Config("multi-task loss over an empty task set".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{detect_encode, BoundingBox};
    use candle_core::Device;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn dice_perfect_and_half_overlap() {
        // 1x4 image, gt pixels {0, 1}
        let gt = one_hot(&[1, 1, 0, 0], 1, 2, 1, 4, DType::F64).unwrap();
        assert!(scalar(&dice_loss(&gt, &gt).unwrap()) < 1e-6);

        let pred = one_hot(&[0, 1, 1, 0], 1, 2, 1, 4, DType::F64).unwrap();
        let l = scalar(&dice_loss(&pred, &gt).unwrap());
        assert!((l - 0.5).abs() < 1e-6, "{l}");

        let bg = one_hot(&[0, 0, 0, 0], 1, 2, 1, 4, DType::F64).unwrap();
        assert!((scalar(&dice_loss(&bg, &gt).unwrap()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dice_shape_mismatch() {
        let a = one_hot(&[0, 1], 1, 2, 1, 2, DType::F64).unwrap();
        let b = one_hot(&[0, 1, 0], 1, 2, 1, 3, DType::F64).unwrap();
        assert!(matches!(dice_loss(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_values() {
        let dev = Device::Cpu;
        let uniform = Tensor::zeros((1, 5), DType::F64, &dev).unwrap();
        assert!((scalar(&cross_entropy_loss(&uniform, &[2]).unwrap()) - 5f64.ln()).abs() < 1e-12);
        let l = Tensor::new(&[[1.0f64, 0.0]], &dev).unwrap();
        let v = scalar(&cross_entropy_loss(&l, &[0]).unwrap());
        assert!((v - 0.313_261_687_518_222_8).abs() < 1e-12);
        let sat = Tensor::new(&[[60.0f64, 0.0]], &dev).unwrap();
        assert!(scalar(&cross_entropy_loss(&sat, &[0]).unwrap()) < 1e-20);
        assert!(cross_entropy_loss(&l, &[2]).is_err());
    }

    #[test]
    fn l1_values() {
        let dev = Device::Cpu;
        let p = Tensor::new(&[3.0f64], &dev).unwrap();
        let g = Tensor::new(&[5.0f64], &dev).unwrap();
        assert_eq!(scalar(&l1_loss(&p, &g).unwrap()), 2.0);
        assert_eq!(scalar(&l1_loss(&p, &p).unwrap()), 0.0);
        let p = Tensor::new(&[1.0f64, 3.0], &dev).unwrap();
        let g = Tensor::new(&[0.0f64, 0.0], &dev).unwrap();
        assert_eq!(scalar(&l1_loss(&p, &g).unwrap()), 2.0);
    }

    #[test]
    fn smooth_l1_pieces() {
        let dev = Device::Cpu;
        let z = Tensor::zeros(4, DType::F64, &dev).unwrap();
        let r = Tensor::new(&[0.2f64, 0.0, 0.0, 0.0], &dev).unwrap();
        assert!((scalar(&smooth_l1(&r, &z).unwrap()) - 0.02).abs() < 1e-15);
        let r = Tensor::new(&[2.0f64, 0.0, 0.0, 0.0], &dev).unwrap();
        assert!((scalar(&smooth_l1(&r, &z).unwrap()) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_detection_has_tiny_loss() {
        let target = detect_encode(&BoundingBox::new(0.41, 0.62, 0.3, 0.2), 7, 7).unwrap();
        let n = 49;
        let idx = target.cell.0 * 7 + target.cell.1;
        let mut logits = vec![0f64; 5 * n];
        for (i, v) in logits[..n].iter_mut().enumerate() {
            *v = if i == idx { 30.0 } else { -30.0 };
        }
        for c in 0..4 {
            let y = target.regression[c];
            logits[(c + 1) * n + idx] = (y / (1.0 - y)).ln();
        }
        let t = Tensor::from_vec(logits, (1, 5, 7, 7), &Device::Cpu).unwrap();
        let l = scalar(&detection_loss(&t, &[target.clone()]).unwrap());
        assert!(l < 1e-3, "{l}");
        let mut missing = target;
        missing.cell = (9, 9);
        assert!(detection_loss(&t, &[missing]).is_err());
    }

    #[test]
    fn weighted_sum() {
        let dev = Device::Cpu;
        let mut losses = BTreeMap::new();
        losses.insert("a".to_string(), Tensor::new(0.5f64, &dev).unwrap());
        losses.insert("b".to_string(), Tensor::new(0.3f64, &dev).unwrap());
        let v = scalar(&multi_task_loss(&losses, &LossWeights::default()).unwrap());
        assert!((v - 0.8).abs() < 1e-15);
        let w = LossWeights([("a".to_string(), 2.0), ("b".to_string(), 0.0)].into());
        assert!((scalar(&multi_task_loss(&losses, &w).unwrap()) - 1.0).abs() < 1e-15);
        losses.remove("b");
        assert_eq!(scalar(&multi_task_loss(&losses, &LossWeights::default()).unwrap()), 0.5);
        assert!(multi_task_loss(&BTreeMap::new(), &LossWeights::default()).is_err());
        let neg = LossWeights([("a".to_string(), -1.0)].into());
        assert!(multi_task_loss(&losses, &neg).is_err());
    }
}
