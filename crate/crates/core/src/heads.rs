//! Task heads over the shared feature maps.
//!
//! - [`SegmentationHead`]: DPT-style decoder. Four tapped layers are
//!   reassembled at 4x, 2x, 1x and 0.5x the token grid, fused coarse-to-fine
//!   with residual conv units, and upsampled to the input resolution.
//! - [`PooledHead`]: global average pooling plus a two-layer MLP, used for
//!   classification and scalar regression.
//! - [`DetectionHead`]: per-cell objectness heatmap and box parameters on the
//!   feature grid, with the matching target encoder and single-box decoder.

use candle_core::{Tensor, D};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, apply, Conv2d, Init, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationHeadConfig {
    pub tap_layers: [usize; 4],
    pub fusion_dim: usize,
    /// Channels of the last full-resolution conv before the classifier.
    pub head_dim: usize,
}

impl Default for SegmentationHeadConfig {
    fn default() -> Self {
        Self {
            tap_layers: [3, 6, 9, 12],
            fusion_dim: 256,
            head_dim: 32,
        }
    }
}

impl SegmentationHeadConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "tap layers {:?} must be strictly increasing",
                self.tap_layers
            )));
        }
        if let Some(bad) = self.tap_layers.iter().find(|&&l| l == 0 || l > depth) {
            return Err(Error::Config(format!("tap layer {bad} outside 1..={depth}")));
        }
        if self.fusion_dim < 2 || self.head_dim == 0 {
            return Err(Error::Config("fusion_dim must be >= 2 and head_dim >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResidualConvUnit {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualConvUnit {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), dim, dim, 3, 1, true)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), dim, dim, 3, 1, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv1.forward(&x.relu()?)?;
        let y = self.conv2.forward(&y.relu()?)?;
        Ok((y + x)?)
    }
}

#[derive(Debug, Clone)]
struct FusionBlock {
    skip_unit: Option<ResidualConvUnit>,
    unit: ResidualConvUnit,
    out: Conv2d,
}

impl FusionBlock {
    fn forward(&self, x: &Tensor, skip: Option<&Tensor>, size: (usize, usize)) -> Result<Tensor> {
        let x = match (skip, &self.skip_unit) {
            (Some(s), Some(u)) => (x + u.forward(s)?)?,
            _ => x.clone(),
        };
        let x = self.unit.forward(&x)?;
        let x = nn::resize_bilinear(&x, size.0, size.1)?;
        self.out.forward(&x)
    }
}

#[derive(Debug, Clone)]
enum Resample {
    Up(usize, Conv2d),
    Identity,
    Down(Conv2d),
}

#[derive(Debug, Clone)]
struct Reassemble {
    project: Conv2d,
    resample: Resample,
    refine: Conv2d,
}

impl Reassemble {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.project.forward(x)?;
        let x = match &self.resample {
            Resample::Up(f, conv) => {
                let (_, _, h, w) = x.dims4()?;
                conv.forward(&nn::resize_bilinear(&x, h * f, w * f)?)?
            }
            Resample::Identity => x,
            Resample::Down(conv) => conv.forward(&x)?,
        };
        self.refine.forward(&x)
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationHead {
    config: SegmentationHeadConfig,
    num_classes: usize,
    reassemble: Vec<Reassemble>,
    fusion: Vec<FusionBlock>,
    conv_a: Conv2d,
    conv_b: Conv2d,
    classifier: Conv2d,
}

impl SegmentationHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &SegmentationHeadConfig,
        embed_dim: usize,
        depth: usize,
        num_classes: usize,
    ) -> Result<Self> {
        config.validate(depth)?;
        if num_classes == 0 {
            return Err(Error::Config("segmentation needs at least one class".into()));
        }
        let f = config.fusion_dim;
        let mut reassemble = Vec::with_capacity(4);
        for level in 0..4 {
            let pre = format!("{name}.reassemble.{level}");
            let project = Conv2d::new(store, &format!("{pre}.project"), embed_dim, f, 1, 1, true)?;
            let resample = match level {
                0 => Resample::Up(4, Conv2d::new(store, &format!("{pre}.resample"), f, f, 3, 1, true)?),
                1 => Resample::Up(2, Conv2d::new(store, &format!("{pre}.resample"), f, f, 3, 1, true)?),
                2 => Resample::Identity,
                _ => Resample::Down(Conv2d::new(store, &format!("{pre}.resample"), f, f, 3, 2, true)?),
            };
            let refine = Conv2d::new(store, &format!("{pre}.refine"), f, f, 3, 1, false)?;
            reassemble.push(Reassemble {
                project,
                resample,
                refine,
            });
        }
        let mut fusion = Vec::with_capacity(4);
        for level in 0..4 {
            let pre = format!("{name}.fusion.{level}");
            let skip_unit = if level == 3 {
                None
            } else {
                Some(ResidualConvUnit::new(store, &format!("{pre}.skip"), f)?)
            };
            fusion.push(FusionBlock {
                skip_unit,
                unit: ResidualConvUnit::new(store, &format!("{pre}.unit"), f)?,
                out: Conv2d::new(store, &format!("{pre}.out"), f, f, 1, 1, true)?,
            });
        }
        let conv_a = Conv2d::new(store, &format!("{name}.out.conv1"), f, f / 2, 3, 1, true)?;
        let conv_b = Conv2d::new(store, &format!("{name}.out.conv2"), f / 2, config.head_dim, 3, 1, true)?;
        let classifier = Conv2d::new(store, &format!("{name}.out.classifier"), config.head_dim, num_classes, 1, 1, true)?;
        Ok(Self {
            config: config.clone(),
            num_classes,
            reassemble,
            fusion,
            conv_a,
            conv_b,
            classifier,
        })
    }

    pub fn config(&self) -> &SegmentationHeadConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `taps` holds the `(B, D, h, w)` grids of the configured tap layers in
    /// ascending order. Returns logits `(B, num_classes, H, W)`.
    pub fn forward(&self, taps: &[&Tensor], output: (usize, usize)) -> Result<Tensor> {
        if taps.len() != 4 {
            return Err(Error::Config(format!(
                "segmentation head needs 4 tapped layers, got {}",
                taps.len()
            )));
        }
        let levels = taps
            .iter()
            .zip(&self.reassemble)
            .map(|(t, r)| r.forward(t))
            .collect::<Result<Vec<_>>>()?;
        let size = |t: &Tensor| -> Result<(usize, usize)> {
            let (_, _, h, w) = t.dims4()?;
            Ok((h, w))
        };
        let mut path = self.fusion[3].forward(&levels[3], None, size(&levels[2])?)?;
        path = self.fusion[2].forward(&path, Some(&levels[2]), size(&levels[1])?)?;
        path = self.fusion[1].forward(&path, Some(&levels[1]), size(&levels[0])?)?;
        let (h0, w0) = size(&levels[0])?;
        path = self.fusion[0].forward(&path, Some(&levels[0]), (2 * h0, 2 * w0))?;
        let x = self.conv_a.forward(&path)?;
        let x = nn::resize_bilinear(&x, output.0, output.1)?;
        let x = self.conv_b.forward(&x)?.relu()?;
        self.classifier.forward(&x)
    }

    /// Pulls this head's tapped layers out of an encoder output.
    pub fn select_taps<'a>(&self, out: &'a crate::backbone::BackboneOutput) -> Result<Vec<&'a Tensor>> {
        self.config
            .tap_layers
            .iter()
            .map(|l| {
                out.taps
                    .get(l)
                    .ok_or_else(|| Error::Config(format!("tapped layer {l} missing from encoder output")))
            })
            .collect()
    }
}

/// Global average pooling over the spatial dims of `(B, D, h, w)`.
pub fn global_pool(features: &Tensor) -> Result<Tensor> {
    Ok(features.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Pooling + MLP head. Classification emits `num_classes` logits; regression
/// emits one value multiplied by a fixed `output_scale` (resized-pixel units).
#[derive(Debug, Clone)]
pub struct PooledHead {
    fc1: Linear,
    fc2: Linear,
    output_scale: f64,
}

impl PooledHead {
    pub fn classifier(store: &mut ParamStore, name: &str, dim: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "classification needs at least 2 classes, got {num_classes}"
            )));
        }
        Self::build(store, name, dim, num_classes, 1.0)
    }

    pub fn regressor(store: &mut ParamStore, name: &str, dim: usize, output_scale: f64) -> Result<Self> {
        Self::build(store, name, dim, 1, output_scale)
    }

    fn build(store: &mut ParamStore, name: &str, dim: usize, out: usize, output_scale: f64) -> Result<Self> {
        Ok(Self {
            fc1: nn::linear(store, &format!("{name}.fc1"), dim, dim, Init::FanIn)?,
            fc2: nn::linear(store, &format!("{name}.fc2"), dim, out, Init::FanIn)?,
            output_scale,
        })
    }

    /// `(B, D, h, w)` -> `(B, out)`.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let pooled = global_pool(features)?;
        let y = apply(&self.fc2, &nn::gelu(&apply(&self.fc1, &pooled)?)?)?;
        if self.output_scale == 1.0 {
            Ok(y)
        } else {
            Ok((y * self.output_scale)?)
        }
    }
}

/// Box in image-normalized coordinates: center `(cx, cy)`, extents `(bw, bh)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub bw: f64,
    pub bh: f64,
    #[serde(default = "one")]
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, bw: f64, bh: f64) -> Self {
        Self {
            cx,
            cy,
            bw,
            bh,
            score: 1.0,
        }
    }

    /// `(x0, y0, x1, y1)` clamped to the unit square.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let c = |v: f64| v.clamp(0.0, 1.0);
        (
            c(self.cx - self.bw / 2.0),
            c(self.cy - self.bh / 2.0),
            c(self.cx + self.bw / 2.0),
            c(self.cy + self.bh / 2.0),
        )
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.bw, self.bh]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}

/// Per-cell detection output; `box_params` is `[dx, dy, bw, bh]` per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGrid {
    pub rows: usize,
    pub cols: usize,
    pub heatmap: Vec<f64>,
    pub box_params: [Vec<f64>; 4],
}

/// Training target for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTarget {
    pub rows: usize,
    pub cols: usize,
    pub heatmap: Vec<f64>,
    /// `(row, col)` of the cell holding the box center.
    pub cell: (usize, usize),
    /// `[dx, dy, bw, bh]` supervised at `cell`.
    pub regression: [f64; 4],
}

/// Splat radius for a box on an `rows x cols` grid.
pub fn splat_radius(gt: &BoundingBox, rows: usize, cols: usize) -> usize {
    let extent = (gt.bw * cols as f64).min(gt.bh * rows as f64);
    ((extent / 3.0).round() as usize).max(1)
}

pub fn detect_encode(gt: &BoundingBox, rows: usize, cols: usize) -> Result<DetectionTarget> {
    if !gt.is_valid() {
        return Err(Error::InvalidSample(format!("box {gt:?} outside the unit square")));
    }
    if gt.bw <= 0.0 || gt.bh <= 0.0 {
        return Err(Error::InvalidSample(format!("degenerate box {gt:?}")));
    }
    let col = ((gt.cx * cols as f64).floor() as usize).min(cols - 1);
    let row = ((gt.cy * rows as f64).floor() as usize).min(rows - 1);
    let radius = splat_radius(gt, rows, cols);
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let mut heatmap = vec![0.0f64; rows * cols];
    let r = radius as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let (y, x) = (row as isize + dy, col as isize + dx);
            if y < 0 || x < 0 || y >= rows as isize || x >= cols as isize {
                continue;
            }
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            let cell = &mut heatmap[y as usize * cols + x as usize];
            *cell = cell.max(v);
        }
    }
    Ok(DetectionTarget {
        rows,
        cols,
        heatmap,
        cell: (row, col),
        regression: [
            gt.cx * cols as f64 - col as f64,
            gt.cy * rows as f64 - row as f64,
            gt.bw,
            gt.bh,
        ],
    })
}

/// Decodes the single highest-scoring box; ties go to the first cell in
/// row-major order.
pub fn detect_decode(grid: &DetectionGrid) -> BoundingBox {
    let mut best = 0;
    for (i, v) in grid.heatmap.iter().enumerate() {
        if *v > grid.heatmap[best] {
            best = i;
        }
    }
    let (row, col) = (best / grid.cols, best % grid.cols);
    let [dx, dy, bw, bh] = &grid.box_params;
    BoundingBox {
        cx: (col as f64 + dx[best]) / grid.cols as f64,
        cy: (row as f64 + dy[best]) / grid.rows as f64,
        bw: bw[best],
        bh: bh[best],
        score: grid.heatmap[best],
    }
}

/// The grid a perfect predictor would emit for `target`.
pub fn perfect_grid(target: &DetectionTarget) -> DetectionGrid {
    let n = target.rows * target.cols;
    let idx = target.cell.0 * target.cols + target.cell.1;
    let mut box_params: [Vec<f64>; 4] = Default::default();
    for (c, param) in box_params.iter_mut().enumerate() {
        *param = vec![0.0; n];
        param[idx] = target.regression[c];
    }
    DetectionGrid {
        rows: target.rows,
        cols: target.cols,
        heatmap: target.heatmap.clone(),
        box_params,
    }
}

#[derive(Debug, Clone)]
pub struct DetectionHead {
    conv: Conv2d,
    out: Conv2d,
}

/// Initial objectness bias, i.e. a prior probability of about 0.1 per cell.
const HEATMAP_PRIOR_LOGIT: f64 = -2.19;

impl DetectionHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let conv = Conv2d::new(store, &format!("{name}.conv"), dim, dim, 3, 1, true)?;
        let out = Conv2d::new(store, &format!("{name}.out"), dim, 5, 1, 1, true)?;
        let bias_name = format!("{name}.out.bias");
        let mut b = store
            .get(&bias_name)
            .expect("bias just created")
            .as_tensor()
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?;
        b[0] = HEATMAP_PRIOR_LOGIT;
        store.set(&bias_name, &Tensor::new(b, store.device())?)?;
        Ok(Self { conv, out })
    }

    /// Raw logits `(B, 5, h, w)`: channel 0 objectness, 1..5 box parameters.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.conv.forward(features)?.relu()?)
    }

    /// Activated grids, one per batch element.
    pub fn to_grids(logits: &Tensor) -> Result<Vec<DetectionGrid>> {
        let (b, c, h, w) = logits.dims4()?;
        if c != 5 {
            return Err(Error::Shape(format!("detection logits need 5 channels, got {c}")));
        }
        let act = nn::sigmoid(&logits.to_dtype(candle_core::DType::F64)?)?;
        let mut grids = Vec::with_capacity(b);
        for i in 0..b {
            let chans = act.get(i)?.reshape((5, h * w))?.to_vec2::<f64>()?;
            let mut it = chans.into_iter();
            let heatmap = it.next().unwrap();
            let box_params = [
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
            ];
            grids.push(DetectionGrid {
                rows: h,
                cols: w,
                heatmap,
                box_params,
            });
        }
        Ok(grids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn center_cell_of_centered_box() {
        let t = detect_encode(&BoundingBox::new(0.5, 0.5, 0.2, 0.2), 14, 14).unwrap();
        assert_eq!(t.cell, (7, 7));
        assert_eq!(t.heatmap[7 * 14 + 7], 1.0);
    }

    #[test]
    fn origin_box_has_zero_offsets() {
        let t = detect_encode(&BoundingBox::new(0.0, 0.0, 0.1, 0.1), 14, 14).unwrap();
        assert_eq!(t.cell, (0, 0));
        assert_eq!(t.regression[0], 0.0);
        assert_eq!(t.regression[1], 0.0);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(detect_encode(&BoundingBox::new(0.5, 0.5, 0.0, 0.2), 14, 14).is_err());
        assert!(detect_encode(&BoundingBox::new(0.5, 1.5, 0.1, 0.2), 14, 14).is_err());
    }

    #[test]
    fn decode_one_hot_peak() {
        let n = 14 * 14;
        let idx = 7 * 14 + 7;
        let mut heatmap = vec![0.0; n];
        heatmap[idx] = 1.0;
        let mut params: [Vec<f64>; 4] = Default::default();
        for (c, v) in [0.5, 0.5, 0.25, 0.25].iter().enumerate() {
            params[c] = vec![0.0; n];
            params[c][idx] = *v;
        }
        let b = detect_decode(&DetectionGrid {
            rows: 14,
            cols: 14,
            heatmap,
            box_params: params,
        });
        assert!((b.cx - 7.5 / 14.0).abs() < 1e-15);
        assert!((b.cy - 7.5 / 14.0).abs() < 1e-15);
        assert_eq!((b.bw, b.bh, b.score), (0.25, 0.25, 1.0));
    }

    #[test]
    fn uniform_heatmap_ties_to_first_cell() {
        let grid = DetectionGrid {
            rows: 3,
            cols: 3,
            heatmap: vec![0.5; 9],
            box_params: [vec![0.0; 9], vec![0.0; 9], vec![0.1; 9], vec![0.1; 9]],
        };
        let b = detect_decode(&grid);
        assert_eq!((b.cx, b.cy), (0.0, 0.0));
    }

    #[test]
    fn splat_radius_follows_box_size() {
        assert_eq!(splat_radius(&BoundingBox::new(0.5, 0.5, 0.05, 0.05), 14, 14), 1);
        assert_eq!(splat_radius(&BoundingBox::new(0.5, 0.5, 0.9, 0.6), 14, 14), 3);
    }

    #[test]
    fn zero_weight_classifier_emits_bias() {
        let mut store = ParamStore::new(3, DType::F64);
        let head = PooledHead::classifier(&mut store, "head.t", 4, 3).unwrap();
        let dev = Device::Cpu;
        store.set("head.t.fc2.weight", &Tensor::zeros((3, 4), DType::F64, &dev).unwrap()).unwrap();
        store.set("head.t.fc2.bias", &Tensor::new(&[1.0f64, -2.0, 0.5], &dev).unwrap()).unwrap();
        let f = Tensor::randn(0f64, 1.0, (2, 4, 3, 3), &dev).unwrap();
        let y = head.forward(&f).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(y, vec![vec![1.0, -2.0, 0.5]; 2]);
    }

    #[test]
    fn classifier_needs_two_classes() {
        let mut store = ParamStore::new(0, DType::F32);
        assert!(PooledHead::classifier(&mut store, "h", 4, 1).is_err());
    }

    #[test]
    fn tap_layer_beyond_depth_rejected() {
        let cfg = SegmentationHeadConfig {
            tap_layers: [3, 6, 9, 15],
            ..Default::default()
        };
        assert!(cfg.validate(12).is_err());
        let mut store = ParamStore::new(0, DType::F32);
        assert!(SegmentationHead::new(&mut store, "h", &cfg, 8, 12, 2).is_err());
    }

    #[test]
    fn segmentation_output_matches_input_resolution() {
        let mut store = ParamStore::new(0, DType::F32);
        let cfg = SegmentationHeadConfig {
            tap_layers: [1, 2, 3, 4],
            fusion_dim: 8,
            head_dim: 4,
        };
        let head = SegmentationHead::new(&mut store, "h", &cfg, 6, 4, 2).unwrap();
        let dev = Device::Cpu;
        let tap = Tensor::randn(0f32, 1.0, (1, 6, 7, 7), &dev).unwrap();
        let y = head.forward(&[&tap, &tap, &tap, &tap], (112, 112)).unwrap();
        assert_eq!(y.dims(), &[1, 2, 112, 112]);
        assert!(head.forward(&[&tap, &tap], (112, 112)).is_err());
    }
}
