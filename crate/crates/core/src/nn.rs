//! Small transformer/conv building blocks, seeded parameter init and the
//! optimizer schedule shared by every trainable network.

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{linear, AdamW, Linear, Optimizer, ParamsAdamW, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable sub-seed for a named stream, so stages never share RNG state.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(seed ^ splitmix(h))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(dim: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self { fc1: linear(dim, hidden, vb.pp("fc1"))?, fc2: linear(hidden, dim, vb.pp("fc2"))? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = gelu(&self.fc1.forward(x)?)?;
        Ok(self.fc2.forward(&h)?)
    }
}

pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    head_dim: usize,
}

impl SelfAttention {
    pub fn new(dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        assert!(dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        Ok(Self {
            qkv: linear(dim, dim * 3, vb.pp("qkv"))?,
            proj: linear(dim, dim, vb.pp("proj"))?,
            heads,
            head_dim: dim / heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_biased(x, None)
    }

    /// Attention with an additive key bias `[B, 1, 1, N]` (large negative
    /// values hide keys).
    pub fn forward_biased(&self, x: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let qkv = self.qkv.forward(x)?.reshape((b, n, 3, self.heads, self.head_dim))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut att = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(bias) = key_bias {
            att = att.broadcast_add(bias)?;
        }
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
        Ok(self.proj.forward(&out)?)
    }
}

/// Layer norm built from differentiable primitives. The fused candle-nn
/// kernel has no backward pass and silently cuts the graph.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

pub fn layer_norm(dim: usize, eps: f64, vb: VarBuilder) -> Result<LayerNorm> {
    Ok(LayerNorm {
        weight: vb.get_with_hints(dim, "weight", candle_nn::Init::Const(1.0))?,
        bias: vb.get_with_hints(dim, "bias", candle_nn::Init::Const(0.0))?,
        eps,
    })
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Pre-norm transformer block.
pub struct Block {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(dim: usize, heads: usize, mlp_ratio: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: layer_norm(dim, 1e-6, vb.pp("norm1"))?,
            attn: SelfAttention::new(dim, heads, vb.pp("attn"))?,
            norm2: layer_norm(dim, 1e-6, vb.pp("norm2"))?,
            mlp: Mlp::new(dim, dim * mlp_ratio, vb.pp("mlp"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_biased(x, None)
    }

    pub fn forward_biased(&self, x: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward_biased(&self.norm1.forward(x)?, key_bias)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// Stack of blocks followed by a final layer norm.
pub struct Transformer {
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Transformer {
    pub fn new(dim: usize, depth: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        let blocks =
            (0..depth).map(|i| Block::new(dim, heads, 4, vb.pp(format!("blocks.{i}")))).collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, norm: layer_norm(dim, 1e-6, vb.pp("norm"))? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_biased(x, None)
    }

    pub fn forward_biased(&self, x: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let mut x = x.clone();
        for block in &self.blocks {
            x = block.forward_biased(&x, key_bias)?;
        }
        self.norm.forward(&x)
    }
}

/// Same-padded `k x k` convolution over NHWC tensors, computed as a
/// concatenation of shifted views followed by one matmul.
pub struct ConvNhwc {
    proj: Linear,
    kernel: usize,
}

impl ConvNhwc {
    pub fn new(cin: usize, cout: usize, kernel: usize, vb: VarBuilder) -> Result<Self> {
        assert!(kernel % 2 == 1, "kernel must be odd");
        Ok(Self { proj: linear(kernel * kernel * cin, cout, vb.pp("proj"))?, kernel })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let cols = if self.kernel == 1 { x.clone() } else { self.unfold(x)? };
        let k = cols.dim(3)?;
        let y = self.proj.forward(&cols.reshape((b * h * w, k))?)?;
        Ok(y.reshape((b, h, w, ()))?)
    }

    fn unfold(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.contiguous()?.apply_op1(crate::im2col::Unfold { kernel: self.kernel })?)
    }
}

/// `[B, H, W, C] -> [B, H/f, W/f, f*f*C]`.
pub fn space_to_depth(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h / f, f, w / f, f, c))?.permute((0, 1, 3, 2, 4, 5))?.reshape((b, h / f, w / f, f * f * c))?)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let c_out = c / (f * f);
    Ok(x.reshape((b, h, w, f, f, c_out))?.permute((0, 1, 3, 2, 4, 5))?.reshape((b, h * f, w * f, c_out))?)
}

/// Overwrites every variable in `varmap` with deterministic values.
///
/// The CPU backend cannot be seeded, so initial weights come from here.
/// Rules, by parameter name: `*bias` zero; rank-1 `*weight` one (norm
/// gains); names containing `pos`, `embed` or `mask_token` N(0, 0.02);
/// `codebook` U(-1/C, 1/C); everything else U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
pub fn seeded_init(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let count: usize = dims.iter().product();
        let mut r = rng(derive_seed(seed, name));
        let values: Vec<f32> = if name.ends_with("bias") {
            vec![0.0; count]
        } else if dims.len() == 1 && name.ends_with("weight") {
            vec![1.0; count]
        } else if name.contains("codebook") {
            let bound = 1.0 / dims[0] as f32;
            (0..count).map(|_| r.random_range(-bound..bound)).collect()
        } else if name.contains("pos") || name.contains("embed") || name.contains("mask_token") {
            let n = Normal::new(0.0f32, 0.02).expect("valid normal");
            (0..count).map(|_| n.sample(&mut r)).collect()
        } else {
            let fan_in: usize = dims[1..].iter().product::<usize>().max(1);
            let bound = 1.0 / (fan_in as f32).sqrt();
            (0..count).map(|_| r.random_range(-bound..bound)).collect()
        };
        var.set(&Tensor::from_vec(values, dims.as_slice(), &Device::Cpu)?)?;
    }
    Ok(())
}

/// Vars of `varmap` in name order.
pub fn sorted_vars(varmap: &VarMap) -> Vec<(String, Var)> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut v: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

pub fn new_varmap_builder(varmap: &VarMap) -> VarBuilder<'static> {
    VarBuilder::from_varmap(varmap, DType::F32, &Device::Cpu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: usize,
    pub min_lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { peak_lr: 1.5e-3, weight_decay: 0.05, beta1: 0.9, beta2: 0.95, warmup_steps: 20, min_lr: 0.0 }
    }
}

/// AdamW driven by a linear-warmup cosine-decay learning rate.
pub struct ScheduledAdamW {
    opt: AdamW,
    cfg: OptimizerConfig,
    total_steps: usize,
    step: usize,
}

impl ScheduledAdamW {
    pub fn new(vars: Vec<Var>, cfg: &OptimizerConfig, total_steps: usize) -> Result<Self> {
        let params = ParamsAdamW {
            lr: cfg.peak_lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        };
        Ok(Self { opt: AdamW::new(vars, params)?, cfg: cfg.clone(), total_steps: total_steps.max(1), step: 0 })
    }

    pub fn lr_at(cfg: &OptimizerConfig, step: usize, total: usize) -> f64 {
        let warm = cfg.warmup_steps.min(total);
        if step < warm {
            return cfg.peak_lr * (step + 1) as f64 / warm as f64;
        }
        let span = (total - warm).max(1) as f64;
        let progress = ((step - warm) as f64 / span).min(1.0);
        cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn current_lr(&self) -> f64 {
        Self::lr_at(&self.cfg, self.step, self.total_steps)
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        self.opt.set_learning_rate(self.current_lr());
        self.opt.backward_step(loss)?;
        self.step += 1;
        Ok(())
    }
}

/// Softmax cross-entropy against probability targets, per row: `[N, C] -> [N]`.
pub fn soft_cross_entropy_rows(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok((target * logp)?.sum(D::Minus1)?.neg()?)
}

/// Hard-label cross-entropy with optional label smoothing, mean over rows.
pub fn cross_entropy_smoothed(logits: &Tensor, labels: &[u32], smoothing: f64) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    let off = smoothing / c as f64;
    let on = 1.0 - smoothing + off;
    let mut t = vec![off as f32; n * c];
    for (i, &l) in labels.iter().enumerate() {
        t[i * c + l as usize] = on as f32;
    }
    let target = Tensor::from_vec(t, (n, c), logits.device())?;
    Ok(soft_cross_entropy_rows(logits, &target)?.mean_all()?)
}

pub fn argmax_rows(logits: &Tensor) -> Result<Vec<u32>> {
    Ok(logits.argmax(D::Minus1)?.to_dtype(DType::U32)?.to_vec1::<u32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_gradient_matches_finite_difference() {
        let vm = VarMap::new();
        let norm = layer_norm(5, 1e-6, new_varmap_builder(&vm)).unwrap();
        let x0 = [0.3f64, -1.2, 0.7, 2.0, -0.4];
        let w = [0.5f64, -1.0, 2.0, 0.1, 1.5];
        let f = |x: &[f64]| -> f64 {
            let m = x.iter().sum::<f64>() / 5.0;
            let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 5.0;
            x.iter().zip(&w).map(|(a, b)| (a - m) / (v + 1e-6).sqrt() * b).sum()
        };
        let x = Var::new(&x0.map(|v| v as f32)[..], &Device::Cpu).unwrap();
        let wt = Tensor::new(&w.map(|v| v as f32)[..], &Device::Cpu).unwrap();
        let out = (norm.forward(x.as_tensor()).unwrap() * wt).unwrap().sum_all().unwrap();
        assert!((out.to_scalar::<f32>().unwrap() as f64 - f(&x0)).abs() < 1e-4);
        let g = out.backward().unwrap().get(x.as_tensor()).unwrap().to_vec1::<f32>().unwrap();
        for i in 0..5 {
            let (mut hi, mut lo) = (x0, x0);
            hi[i] += 1e-5;
            lo[i] -= 1e-5;
            let fd = (f(&hi) - f(&lo)) / 2e-5;
            assert!((g[i] as f64 - fd).abs() < 1e-3, "d/dx{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let build = |seed| {
            let vm = VarMap::new();
            let vb = new_varmap_builder(&vm);
            let _t = Transformer::new(16, 1, 2, vb.pp("t")).unwrap();
            seeded_init(&vm, seed).unwrap();
            sorted_vars(&vm)
                .into_iter()
                .flat_map(|(_, v)| v.flatten_all().unwrap().to_vec1::<f32>().unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }

    #[test]
    fn warmup_then_cosine() {
        let cfg = OptimizerConfig { peak_lr: 1.0, warmup_steps: 10, ..Default::default() };
        assert!((ScheduledAdamW::lr_at(&cfg, 9, 110) - 1.0).abs() < 1e-12);
        assert!((ScheduledAdamW::lr_at(&cfg, 60, 110) - 0.5).abs() < 1e-12);
        assert!(ScheduledAdamW::lr_at(&cfg, 109, 110) < 1e-3);
    }

    #[test]
    fn transformer_preserves_shape() {
        let vm = VarMap::new();
        let t = Transformer::new(16, 2, 4, new_varmap_builder(&vm)).unwrap();
        seeded_init(&vm, 1).unwrap();
        let x = Tensor::ones((2, 5, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.forward(&x).unwrap().dims(), &[2, 5, 16]);
    }
}
