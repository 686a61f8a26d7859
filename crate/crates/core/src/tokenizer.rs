//! Small convolutional VQ autoencoder.
//!
//! The encoder downsamples 4x (32x32 -> 8x8), features snap to the nearest
//! codebook row, and the decoder maps an embedding lattice back to pixels.
//! `decode_mixed` builds that lattice from reliable ids at unmasked positions
//! and from probability-weighted codebook sums at masked positions.

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::VarMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::logging::StepLogger;
use crate::nn::{
    depth_to_space, derive_seed, new_varmap_builder, rng, seeded_init, space_to_depth, ConvNhwc, OptimizerConfig,
    ScheduledAdamW,
};
use crate::types::{ImageBatch, ReliabilityMask, SoftTokenDist, TokenGrid};

pub const CHECKPOINT_KIND: &str = "vq-tokenizer";
pub const DOWNSAMPLE: usize = 4;
const INFER_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Conv widths at full and reduced resolution.
    pub channels: [usize; 2],
    pub resolution: usize,
    pub commitment: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Unused codes are re-seeded from encoder outputs every this many steps (0 = never).
    pub restart_every: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            code_dim: 16,
            channels: [32, 96],
            resolution: 32,
            commitment: 0.25,
            steps: 1500,
            batch_size: 32,
            restart_every: 100,
            optimizer: OptimizerConfig { peak_lr: 2e-3, weight_decay: 0.0, warmup_steps: 50, ..Default::default() },
        }
    }
}

impl TokenizerConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.resolution / DOWNSAMPLE, self.resolution / DOWNSAMPLE)
    }
}

pub struct VqTokenizer {
    cfg: TokenizerConfig,
    varmap: VarMap,
    enc: Vec<ConvNhwc>,
    dec: Vec<ConvNhwc>,
    codebook: Var,
}

impl VqTokenizer {
    pub fn new(cfg: &TokenizerConfig, seed: u64) -> Result<Self> {
        ensure!(
            cfg.resolution.is_multiple_of(DOWNSAMPLE),
            Config,
            "tokenizer resolution {} not divisible by {DOWNSAMPLE}",
            cfg.resolution
        );
        let varmap = VarMap::new();
        let vb = new_varmap_builder(&varmap);
        let [c1, c2] = cfg.channels;
        let d = cfg.code_dim;
        let e = vb.pp("enc");
        // Each resolution halving is a 2x2 space-to-depth before the next conv.
        let enc = vec![
            ConvNhwc::new(12, c1, 3, e.pp("conv0"))?,
            ConvNhwc::new(c1, c1, 3, e.pp("conv1"))?,
            ConvNhwc::new(4 * c1, c2, 1, e.pp("conv2"))?,
            ConvNhwc::new(c2, c2, 3, e.pp("conv3"))?,
            ConvNhwc::new(c2, d, 1, e.pp("out"))?,
        ];
        let g = vb.pp("dec");
        let dec = vec![
            ConvNhwc::new(d, c2, 3, g.pp("conv0"))?,
            ConvNhwc::new(c2, c2, 3, g.pp("conv1"))?,
            ConvNhwc::new(c2, 4 * c1, 1, g.pp("conv2"))?,
            ConvNhwc::new(c1, c1, 3, g.pp("conv3"))?,
            ConvNhwc::new(c1, 12, 3, g.pp("out"))?,
        ];
        let cb = vb.get((cfg.codebook_size, d), "codebook")?;
        seeded_init(&varmap, seed)?;
        let codebook = {
            let data = varmap.data().lock().expect("varmap lock poisoned");
            data["codebook"].clone()
        };
        drop(cb);
        Ok(Self { cfg: cfg.clone(), varmap, enc, dec, codebook })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.cfg
    }

    pub fn codebook_size(&self) -> usize {
        self.cfg.codebook_size
    }

    pub fn code_dim(&self) -> usize {
        self.cfg.code_dim
    }

    pub fn grid(&self) -> (usize, usize) {
        self.cfg.grid()
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// Unit-norm codebook rows `[C, d_code]` as used for lookup and decoding.
    pub fn codebook(&self) -> Result<Tensor> {
        l2_normalize(self.codebook.as_tensor())
    }

    fn check_image(&self, image: &ImageBatch) -> Result<()> {
        let (_, c, h, w) = image.dims();
        ensure!(c == 3, Shape, "expected 3 channels, got {c}");
        ensure!(
            h % DOWNSAMPLE == 0 && w % DOWNSAMPLE == 0,
            Shape,
            "image {h}x{w} is not divisible by the downsample factor {DOWNSAMPLE}"
        );
        ensure!(
            h == self.cfg.resolution && w == self.cfg.resolution,
            Shape,
            "image {h}x{w} does not match tokenizer resolution {}",
            self.cfg.resolution
        );
        Ok(())
    }

    /// Continuous encoder output `[B, h, w, d_code]` for NCHW pixels.
    pub fn encoder_features(&self, x: &Tensor) -> Result<Tensor> {
        let e = &self.enc;
        let x = space_to_depth(&x.permute((0, 2, 3, 1))?, 2)?;
        let h = e[1].forward(&e[0].forward(&x)?.relu()?)?.relu()?;
        let h = e[2].forward(&space_to_depth(&h, 2)?)?.relu()?;
        let h = e[3].forward(&h)?.relu()?;
        e[4].forward(&h)
    }

    /// Unit-norm encoder features flattened to `[B*h*w, d]`.
    fn flat_features(&self, x: &Tensor) -> Result<(Tensor, (usize, usize, usize))> {
        let z = self.encoder_features(x)?;
        let (b, h, w, d) = z.dims4()?;
        let flat = z.reshape((b * h * w, d))?;
        Ok((l2_normalize(&flat)?, (b, h, w)))
    }

    /// Nearest-codebook ids for unit-norm `[N, d]` rows.
    fn nearest(&self, flat: &Tensor) -> Result<Tensor> {
        let sim = flat.matmul(&self.codebook()?.t()?)?;
        Ok(sim.argmax(D::Minus1)?)
    }

    fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (flat, (b, h, w)) = self.flat_features(x)?;
        Ok(self.nearest(&flat)?.reshape((b, h, w))?)
    }

    pub fn encode(&self, image: &ImageBatch) -> Result<TokenGrid> {
        self.check_image(image)?;
        let b = image.batch();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < b {
            let len = INFER_CHUNK.min(b - start);
            parts.push(self.encode_tensor(&image.tensor().narrow(0, start, len)?)?);
            start += len;
        }
        TokenGrid::from_tensor(&Tensor::cat(&parts, 0)?)
    }

    /// Codebook rows for each id, laid out `[B, h, w, d_code]`.
    fn hard_embeddings(&self, tokens: &TokenGrid) -> Result<Tensor> {
        tokens.validate(self.cfg.codebook_size)?;
        let (h, w) = tokens.grid();
        let ids = Tensor::from_slice(tokens.ids(), tokens.ids().len(), &Device::Cpu)?;
        Ok(self.codebook()?.index_select(&ids, 0)?.reshape((tokens.batch(), h, w, self.cfg.code_dim))?)
    }

    /// Decodes an embedding lattice `[B, h, w, d_code]` to pixels in `(-1, 1)`.
    /// Output is detached; training uses the straight-through path instead.
    pub fn decode_embeddings(&self, lattice: &Tensor) -> Result<ImageBatch> {
        let b = lattice.dims4()?.0;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < b {
            let len = INFER_CHUNK.min(b - start);
            parts.push(self.decode_lattice(&lattice.narrow(0, start, len)?)?.detach());
            start += len;
        }
        ImageBatch::new(Tensor::cat(&parts, 0)?)
    }

    /// `[B, h, w, d_code]` lattice to NCHW pixels.
    fn decode_lattice(&self, z: &Tensor) -> Result<Tensor> {
        let g = &self.dec;
        let x = g[1].forward(&g[0].forward(z)?.relu()?)?.relu()?;
        let x = depth_to_space(&g[2].forward(&x)?, 2)?.relu()?;
        let x = g[4].forward(&g[3].forward(&x)?.relu()?)?;
        Ok(depth_to_space(&x, 2)?.tanh()?.permute((0, 3, 1, 2))?.contiguous()?)
    }

    pub fn decode_hard(&self, tokens: &TokenGrid) -> Result<ImageBatch> {
        self.decode_embeddings(&self.hard_embeddings(tokens)?)
    }

    /// Embedding lattice for mixed decoding: reliable rows where `mask = 0`,
    /// `soft @ codebook` where `mask = 1`.
    pub fn mixed_embeddings(
        &self,
        reliable: &TokenGrid,
        soft: &SoftTokenDist,
        mask: &ReliabilityMask,
    ) -> Result<Tensor> {
        mask.check_matches(reliable)?;
        let (b, h, w, c) = soft.dims();
        ensure!(
            (b, (h, w)) == (reliable.batch(), reliable.grid()),
            Shape,
            "soft distribution [{b}, {h}, {w}] does not match tokens"
        );
        ensure!(
            c == self.cfg.codebook_size,
            Shape,
            "soft distribution has {c} classes, codebook has {}",
            self.cfg.codebook_size
        );
        soft.validate(1e-3)?;
        let d = self.cfg.code_dim;
        let hard = self.hard_embeddings(reliable)?;
        let weighted = soft.tensor().reshape((b * h * w, c))?.matmul(&self.codebook()?)?.reshape((b, h, w, d))?;
        let m = Tensor::from_slice(mask.bits(), (b, h, w, 1), &Device::Cpu)?.broadcast_as((b, h, w, d))?;
        Ok(m.where_cond(&weighted, &hard)?)
    }

    pub fn decode_mixed(
        &self,
        reliable: &TokenGrid,
        soft: &SoftTokenDist,
        mask: &ReliabilityMask,
    ) -> Result<ImageBatch> {
        self.decode_embeddings(&self.mixed_embeddings(reliable, soft, mask)?)
    }

    /// Token-embedding lattice `[B, h, w, d_code]` for an image batch.
    pub fn embed_image(&self, image: &ImageBatch) -> Result<Tensor> {
        let tokens = self.encode(image)?;
        Ok(self.hard_embeddings(&tokens)?.detach())
    }

    /// Straight-through forward pass; returns `(reconstruction, ids, vq_loss)`.
    fn train_forward(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (flat, (b, h, w)) = self.flat_features(x)?;
        let d = self.cfg.code_dim;
        let ids = self.nearest(&flat.detach())?;
        let zq = self.codebook()?.index_select(&ids, 0)?;
        let codebook_loss = (&zq - flat.detach())?.sqr()?.mean_all()?;
        let commit = (&flat - zq.detach())?.sqr()?.mean_all()?;
        let st = (&flat + (zq - &flat)?.detach())?;
        let recon = self.decode_lattice(&st.reshape((b, h, w, d))?)?;
        let vq = (codebook_loss + (commit * self.cfg.commitment)?)?;
        Ok((recon, ids, vq))
    }

    pub fn save(&self, path: &std::path::Path, config_hash: &str) -> Result<()> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            config_hash: config_hash.into(),
            config: serde_json::to_string(&self.cfg)?,
        };
        checkpoint::save_varmap(path, &meta, &self.varmap)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, CheckpointMeta)> {
        let (meta, tensors) = checkpoint::load_tensors(path, CHECKPOINT_KIND)?;
        let cfg: TokenizerConfig = serde_json::from_str(&meta.config)
            .map_err(|e| Error::checkpoint(path, format!("bad embedded config: {e}")))?;
        let tok = Self::new(&cfg, 0)?;
        checkpoint::load_into_varmap(&tok.varmap, &tensors, None)?;
        Ok((tok, meta))
    }
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// PSNR in dB with images mapped from `[-1, 1]` to `[0, 1]`.
pub fn psnr(a: &ImageBatch, b: &ImageBatch) -> Result<f64> {
    let x = a.to_vec()?;
    let y = b.to_vec()?;
    ensure!(x.len() == y.len(), Shape, "psnr of differently sized batches");
    let mse: f64 = x
        .iter()
        .zip(&y)
        .map(|(&p, &q)| {
            let d = (p as f64 - q as f64) / 2.0;
            d * d
        })
        .sum::<f64>()
        / x.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Fraction of codebook entries used when encoding `tokens`.
pub fn codebook_usage(tokens: &TokenGrid, codebook_size: usize) -> f64 {
    let mut seen = vec![false; codebook_size];
    for &id in tokens.ids() {
        seen[id as usize] = true;
    }
    seen.iter().filter(|&&s| s).count() as f64 / codebook_size as f64
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TokenizerEpoch {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub psnr: f64,
    pub codebook_usage: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TokenizerReport {
    pub step_losses: Vec<f64>,
    pub epochs: Vec<TokenizerEpoch>,
    pub psnr: f64,
    pub codebook_usage: f64,
    pub collapse_warning: bool,
}

pub const COLLAPSE_USAGE: f64 = 0.05;

fn eval_split(tok: &VqTokenizer, data: &Dataset) -> Result<(f64, f64)> {
    let x = data.all()?;
    let z = tok.encode(&x)?;
    let rec = tok.decode_hard(&z)?;
    Ok((psnr(&x, &rec)?, codebook_usage(&z, tok.codebook_size())))
}

/// Trains a tokenizer on `train`, evaluating on `val` once per epoch.
pub fn train_tokenizer(
    train: &Dataset,
    val: &Dataset,
    cfg: &TokenizerConfig,
    seed: u64,
    logger: &mut dyn StepLogger,
) -> Result<(VqTokenizer, TokenizerReport)> {
    ensure!(!train.is_empty(), Dataset, "empty training set");
    let tok = VqTokenizer::new(cfg, derive_seed(seed, "tokenizer-init"))?;
    let mut r = rng(derive_seed(seed, "tokenizer-data"));
    let bs = cfg.batch_size.min(train.len()).max(1);
    let steps_per_epoch = (train.len() / bs).max(1);

    // Start the codebook on real encoder outputs.
    {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut r);
        let take = &order[..train.len().min(64)];
        reseed_codes(&tok, &train.batch(take)?, None, &mut r)?;
    }

    let mut opt = ScheduledAdamW::new(tok.varmap.all_vars(), &cfg.optimizer, cfg.steps)?;
    let mut report = TokenizerReport {
        step_losses: Vec::with_capacity(cfg.steps),
        epochs: Vec::new(),
        psnr: 0.0,
        codebook_usage: 0.0,
        collapse_warning: false,
    };
    let mut used = vec![false; cfg.codebook_size];
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        if order.len() < bs {
            order = (0..train.len()).collect();
            order.shuffle(&mut r);
        }
        let idx: Vec<usize> = order.drain(..bs).collect();
        let x = train.batch(&idx)?;
        let (recon, ids, vq) = tok.train_forward(x.tensor())?;
        let rec_loss = (&recon - x.tensor())?.sqr()?.mean_all()?;
        let loss = (rec_loss + vq)?;
        let lv = loss.to_scalar::<f32>()? as f64;
        if !lv.is_finite() {
            return Err(Error::Diverged(format!("tokenizer loss {lv} at step {step}")));
        }
        opt.backward_step(&loss)?;
        for id in ids.to_vec1::<u32>()? {
            used[id as usize] = true;
        }
        report.step_losses.push(lv);
        logger.log(serde_json::json!({"stage": "tokenizer", "step": step, "loss": lv, "lr": opt.current_lr()}));

        if cfg.restart_every > 0 && (step + 1) % cfg.restart_every == 0 && step + 1 < cfg.steps * 4 / 5 {
            if used.iter().any(|u| !u) {
                reseed_codes(&tok, &x, Some(&used), &mut r)?;
            }
            used.iter_mut().for_each(|u| *u = false);
        }

        let end_of_epoch = (step + 1) % steps_per_epoch == 0 || step + 1 == cfg.steps;
        if end_of_epoch {
            let (p, usage) = eval_split(&tok, val)?;
            let epoch =
                TokenizerEpoch { epoch: report.epochs.len(), step: step + 1, loss: lv, psnr: p, codebook_usage: usage };
            logger.log(
                serde_json::json!({"stage": "tokenizer", "epoch": epoch.epoch, "psnr": p, "codebook_usage": usage}),
            );
            report.epochs.push(epoch);
        }
    }
    let (p, usage) = eval_split(&tok, val)?;
    report.psnr = p;
    report.codebook_usage = usage;
    if usage < COLLAPSE_USAGE {
        log::warn!("codebook collapse: only {:.1}% of entries used on held-out data", usage * 100.0);
        report.collapse_warning = true;
    }
    Ok((tok, report))
}

/// Re-seeds codebook rows from encoder outputs of `x`: all rows when
/// `used` is `None`, otherwise only rows never selected in the window.
fn reseed_codes(tok: &VqTokenizer, x: &ImageBatch, used: Option<&[bool]>, r: &mut crate::nn::SeededRng) -> Result<()> {
    let flat = tok.flat_features(x.tensor())?.0.detach().to_vec2::<f32>()?;
    let mut rows = tok.codebook.as_tensor().to_vec2::<f32>()?;
    let mut pool: Vec<usize> = (0..flat.len()).collect();
    pool.shuffle(r);
    let mut next = pool.into_iter().cycle();
    for (i, row) in rows.iter_mut().enumerate() {
        if used.is_some_and(|u| u[i]) {
            continue;
        }
        let src = &flat[next.next().expect("non-empty pool")];
        for (k, v) in row.iter_mut().enumerate() {
            *v = src[k] + 1e-3 * ((i * 31 + k * 7) % 13) as f32 / 13.0;
        }
    }
    let flat_rows: Vec<f32> = rows.into_iter().flatten().collect();
    tok.codebook.set(
        &Tensor::from_vec(flat_rows, (tok.cfg.codebook_size, tok.cfg.code_dim), &Device::Cpu)?.to_dtype(DType::F32)?,
    )?;
    Ok(())
}
