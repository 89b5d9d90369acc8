//! ViT encoder with task-conditioned mixture-of-experts feed-forward blocks.
//!
//! Shapes, with `h = w = image_size / patch_size` and `N = h * w`:
//! - input images: `(B, 3, image_size, image_size)`
//! - tokens `Z`: `(B, 1 + N, D)`, class token first
//! - feature maps `F`: `(B, D, h, w)`, final-layer patch tokens after the output norm
//!
//! Layers are numbered from 1. A layer listed in `moe_layers` (with MoE enabled)
//! swaps its feed-forward sublayer for a [`MoeBlock`] whose gate sees the token
//! concatenated with the task embedding.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{Tensor, D};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, apply, Init, LayerNorm, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    /// 1-based indices of layers whose feed-forward sublayer is a MoE block.
    pub moe_layers: BTreeSet<usize>,
    pub num_experts: usize,
    pub task_embed_dim: usize,
    pub moe_enabled: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            moe_layers: (7..=12).collect(),
            num_experts: 4,
            task_embed_dim: 64,
            moe_enabled: true,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Shape(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_experts == 0 {
            return Err(Error::Config("num_experts must be at least 1".into()));
        }
        if let Some(bad) = self.moe_layers.iter().find(|&&l| l == 0 || l > self.depth) {
            return Err(Error::Config(format!(
                "moe layer {bad} outside 1..={}",
                self.depth
            )));
        }
        Ok(())
    }

    fn uses_moe(&self, layer: usize) -> bool {
        self.moe_enabled && self.moe_layers.contains(&layer)
    }
}

/// Output of [`Encoder::encode`].
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub tokens: Tensor,
    pub feature_maps: Tensor,
    /// Normalized patch-token grids of intermediate layers, keyed by 1-based layer.
    pub taps: BTreeMap<usize, Tensor>,
}

/// Learnable per-task vectors; each row is its own parameter `task_embed.{task_id}`.
#[derive(Debug, Clone)]
pub struct TaskEmbedding {
    rows: BTreeMap<String, Tensor>,
}

impl TaskEmbedding {
    pub fn new(store: &mut ParamStore, task_ids: &[String], dim: usize) -> Result<Self> {
        let mut rows = BTreeMap::new();
        for id in task_ids {
            let row = store.normal(format!("task_embed.{id}"), &[dim], 0.02)?;
            rows.insert(id.clone(), row);
        }
        Ok(Self { rows })
    }

    pub fn embed(&self, task_id: &str) -> Result<Tensor> {
        self.rows
            .get(task_id)
            .cloned()
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }
}

/// Dense softmax gate over `K` experts: `softmax(W_g [h; e_t])`.
///
/// `h` is `(..., D)`, `task` is `(E,)` and broadcast over every token,
/// `w_gate` is `(K, D + E)`. Returns `(..., K)`.
pub fn gate(h: &Tensor, task: &Tensor, w_gate: &Tensor) -> Result<Tensor> {
    let (k, cols) = w_gate.dims2()?;
    let d = h.dim(D::Minus1)?;
    let e = task.dims1()?;
    if cols != d + e {
        return Err(Error::Shape(format!(
            "gate expects {cols} input features, got token dim {d} + task dim {e}"
        )));
    }
    let mut shape = h.dims().to_vec();
    *shape.last_mut().unwrap() = e;
    let task = task.broadcast_as(shape)?;
    let joint = Tensor::cat(&[h, &task], D::Minus1)?;
    let logits = if joint.rank() == 1 {
        joint.unsqueeze(0)?.matmul(&w_gate.t()?)?.squeeze(0)?
    } else {
        joint.broadcast_matmul(&w_gate.t()?)?
    };
    debug_assert_eq!(logits.dim(D::Minus1)?, k);
    nn::softmax_last(&logits)
}

/// Two-layer feed-forward map `D -> hidden -> D` with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: nn::linear(store, &format!("{name}.fc1"), dim, hidden, Init::Vit)?,
            fc2: nn::linear(store, &format!("{name}.fc2"), hidden, dim, Init::Vit)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        apply(&self.fc2, &nn::gelu(&apply(&self.fc1, x)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct MoeBlock {
    pub layer_index: usize,
    w_gate: Tensor,
    experts: Vec<FeedForward>,
}

impl MoeBlock {
    pub fn new(
        store: &mut ParamStore,
        layer_index: usize,
        dim: usize,
        task_dim: usize,
        num_experts: usize,
    ) -> Result<Self> {
        let prefix = format!("moe.layer.{layer_index}");
        let w_gate = store.normal(format!("{prefix}.gate.weight"), &[num_experts, dim + task_dim], 0.02)?;
        let experts = (0..num_experts)
            .map(|j| FeedForward::new(store, &format!("{prefix}.expert.{j}"), dim, 4 * dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layer_index,
            w_gate,
            experts,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn gate_weight(&self) -> &Tensor {
        &self.w_gate
    }

    pub fn expert(&self, j: usize) -> Option<&FeedForward> {
        self.experts.get(j)
    }

    /// Gating weights for tokens `h` under task embedding `task`.
    pub fn gates(&self, h: &Tensor, task: &Tensor) -> Result<Tensor> {
        gate(h, task, &self.w_gate)
    }

    pub fn forward(&self, h: &Tensor, task: &Tensor) -> Result<Tensor> {
        let g = self.gates(h, task)?;
        self.forward_with_gates(h, &g)
    }

    /// Mixture `sum_i g_i * E_i(h)` under externally supplied gates `(..., K)`.
    pub fn forward_with_gates(&self, h: &Tensor, gates: &Tensor) -> Result<Tensor> {
        let k = gates.dim(D::Minus1)?;
        if k != self.experts.len() {
            return Err(Error::Shape(format!(
                "{k} gate weights for {} experts",
                self.experts.len()
            )));
        }
        if self.experts.len() == 1 {
            return self.experts[0].forward(h);
        }
        let mut out: Option<Tensor> = None;
        for (j, expert) in self.experts.iter().enumerate() {
            let term = expert.forward(h)?.broadcast_mul(&gates.narrow(D::Minus1, j, 1)?)?;
            out = Some(match out {
                None => term,
                Some(acc) => (acc + term)?,
            });
        }
        Ok(out.expect("at least two experts"))
    }
}

#[derive(Debug, Clone)]
enum FeedForwardSublayer {
    Dense(FeedForward),
    Moe(MoeBlock),
}

#[derive(Debug, Clone)]
struct Attention {
    qkv: Linear,
    proj: Linear,
    num_heads: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let dh = d / self.num_heads;
        let qkv = apply(&self.qkv, x)?
            .reshape((b, n, 3, self.num_heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        let attn = nn::softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        apply(&self.proj, &out)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ffn: FeedForwardSublayer,
}

impl EncoderLayer {
    fn forward(&self, x: &Tensor, task: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let h = self.norm2.forward(&x)?;
        let y = match (&self.ffn, task) {
            (FeedForwardSublayer::Dense(f), _) => f.forward(&h)?,
            (FeedForwardSublayer::Moe(m), Some(e)) => m.forward(&h, e)?,
            (FeedForwardSublayer::Moe(m), None) => {
                return Err(Error::Config(format!(
                    "layer {} routes by task but no task was given",
                    m.layer_index
                )))
            }
        };
        Ok((x + y)?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    patch_embed: Linear,
    cls_token: Tensor,
    pos_embed: Tensor,
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
    task_table: Option<TaskEmbedding>,
}

impl Encoder {
    /// Builds the encoder, registering task embeddings for `task_ids` when MoE
    /// is enabled. With MoE disabled no routing parameters are created.
    pub fn new(store: &mut ParamStore, config: &EncoderConfig, task_ids: &[String]) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let p = config.patch_size;
        let n = config.grid() * config.grid();
        let patch_embed = nn::linear(store, "encoder.patch_embed", 3 * p * p, d, Init::Vit)?;
        let cls_token = store.normal("encoder.cls_token", &[1, 1, d], 0.02)?;
        let pos_embed = store.normal("encoder.pos_embed", &[1, n + 1, d], 0.02)?;
        let mut layers = Vec::with_capacity(config.depth);
        for i in 1..=config.depth {
            let pre = format!("encoder.layer.{i}");
            let attn = Attention {
                qkv: nn::linear(store, &format!("{pre}.attn.qkv"), d, 3 * d, Init::Vit)?,
                proj: nn::linear(store, &format!("{pre}.attn.proj"), d, d, Init::Vit)?,
                num_heads: config.num_heads,
            };
            let norm1 = LayerNorm::new(store, &format!("{pre}.norm1"), d)?;
            let norm2 = LayerNorm::new(store, &format!("{pre}.norm2"), d)?;
            let ffn = if config.uses_moe(i) {
                FeedForwardSublayer::Moe(MoeBlock::new(
                    store,
                    i,
                    d,
                    config.task_embed_dim,
                    config.num_experts,
                )?)
            } else {
                FeedForwardSublayer::Dense(FeedForward::new(store, &format!("{pre}.mlp"), d, 4 * d)?)
            };
            layers.push(EncoderLayer {
                norm1,
                attn,
                norm2,
                ffn,
            });
        }
        let norm = LayerNorm::new(store, "encoder.norm", d)?;
        let task_table = if config.moe_enabled && !config.moe_layers.is_empty() {
            Some(TaskEmbedding::new(store, task_ids, config.task_embed_dim)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            layers,
            norm,
            task_table,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn task_table(&self) -> Option<&TaskEmbedding> {
        self.task_table.as_ref()
    }

    pub fn task_embed(&self, task_id: &str) -> Result<Tensor> {
        match &self.task_table {
            Some(t) => t.embed(task_id),
            None => Err(Error::UnknownTask(task_id.to_string())),
        }
    }

    pub fn moe_blocks(&self) -> impl Iterator<Item = &MoeBlock> {
        self.layers.iter().filter_map(|l| match &l.ffn {
            FeedForwardSublayer::Moe(m) => Some(m),
            FeedForwardSublayer::Dense(_) => None,
        })
    }

    pub fn moe_block(&self, layer: usize) -> Option<&MoeBlock> {
        self.moe_blocks().find(|m| m.layer_index == layer)
    }

    /// Applies the MoE block of `layer` to tokens `h` under `task_id`.
    pub fn moe_forward(&self, layer: usize, h: &Tensor, task_id: &str) -> Result<Tensor> {
        let block = self
            .moe_block(layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} has no MoE block")))?;
        let e = self.task_embed(task_id)?;
        check_finite(h)?;
        block.forward(h, &e)
    }

    pub fn encode(&self, images: &Tensor, task_id: Option<&str>) -> Result<BackboneOutput> {
        self.encode_with_taps(images, task_id, &[])
    }

    /// Runs the encoder, additionally returning the normalized patch grids of
    /// the 1-based layers in `taps`.
    pub fn encode_with_taps(
        &self,
        images: &Tensor,
        task_id: Option<&str>,
        taps: &[usize],
    ) -> Result<BackboneOutput> {
        let images = if images.rank() == 3 {
            images.unsqueeze(0)?
        } else {
            images.clone()
        };
        let (b, c, h, w) = images.dims4()?;
        let s = self.config.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Shape(format!(
                "expected images of shape (B, 3, {s}, {s}), got {:?}",
                images.dims()
            )));
        }
        if let Some(bad) = taps.iter().find(|&&t| t == 0 || t > self.config.depth) {
            return Err(Error::Config(format!(
                "tap layer {bad} outside 1..={}",
                self.config.depth
            )));
        }
        let task = match (&self.task_table, task_id) {
            (Some(table), Some(id)) => Some(table.embed(id)?),
            (Some(_), None) => {
                return Err(Error::Config("MoE encoder requires a task id".into()));
            }
            (None, _) => None,
        };

        let p = self.config.patch_size;
        let g = self.config.grid();
        let d = self.config.embed_dim;
        let patches = images
            .reshape((b, 3, g, p, g, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .reshape((b, g * g, 3 * p * p))?;
        let x = apply(&self.patch_embed, &patches)?;
        let cls = self.cls_token.broadcast_as((b, 1, d))?;
        let mut x = Tensor::cat(&[&cls, &x], 1)?.broadcast_add(&self.pos_embed)?;

        let mut tapped = BTreeMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x, task.as_ref())?;
            let index = i + 1;
            if taps.contains(&index) && index != self.config.depth {
                tapped.insert(index, self.to_grid(&self.norm.forward(&x)?)?);
            }
        }
        let tokens = self.norm.forward(&x)?;
        let feature_maps = self.to_grid(&tokens)?;
        if taps.contains(&self.config.depth) {
            tapped.insert(self.config.depth, feature_maps.clone());
        }
        Ok(BackboneOutput {
            tokens,
            feature_maps,
            taps: tapped,
        })
    }

    fn to_grid(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, n, d) = tokens.dims3()?;
        let g = self.config.grid();
        Ok(tokens
            .narrow(1, 1, n - 1)?
            .transpose(1, 2)?
            .reshape((b, d, g, g))?)
    }
}

fn check_finite(t: &Tensor) -> Result<()> {
    let v = t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite token values".into()))
    }
}
