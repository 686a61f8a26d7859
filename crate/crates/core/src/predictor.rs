//! Bidirectional masked-token transformer that estimates clean tokens from a
//! partially masked grid. Frozen once trained; only the ADDP trainer calls it.

use std::path::Path;

use candle_core::{Device, Tensor};
use candle_nn::{embedding, linear, Embedding, Linear, Module, VarMap};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{ensure, Error, Result};
use crate::logging::StepLogger;
use crate::nn::{
    derive_seed, layer_norm, new_varmap_builder, rng, seeded_init, soft_cross_entropy_rows, LayerNorm, OptimizerConfig,
    ScheduledAdamW, SeededRng, Transformer,
};
use crate::types::{ReliabilityMask, SoftTokenDist, TokenGrid};

pub const CHECKPOINT_KIND: &str = "token-predictor";
const INFER_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub codebook_size: usize,
    pub grid: (usize, usize),
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mask_ratio_min: f64,
    pub mask_ratio_max: f64,
    /// Loss weight on unmasked positions, which teaches the copy path.
    pub unmasked_weight: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            grid: (8, 8),
            width: 128,
            depth: 4,
            heads: 4,
            mask_ratio_min: 0.5,
            mask_ratio_max: 1.0,
            unmasked_weight: 0.1,
            steps: 2000,
            batch_size: 64,
            optimizer: OptimizerConfig { peak_lr: 1e-3, warmup_steps: 100, ..Default::default() },
        }
    }
}

pub struct TokenPredictor {
    cfg: PredictorConfig,
    varmap: VarMap,
    tok_embed: Embedding,
    pos_embed: Tensor,
    body: Transformer,
    head_norm: LayerNorm,
    head: Linear,
}

impl TokenPredictor {
    pub fn new(cfg: &PredictorConfig, seed: u64) -> Result<Self> {
        ensure!(cfg.codebook_size > 0, Config, "codebook_size must be positive");
        ensure!(
            cfg.width.is_multiple_of(cfg.heads),
            Config,
            "width {} not divisible by heads {}",
            cfg.width,
            cfg.heads
        );
        let varmap = VarMap::new();
        let vb = new_varmap_builder(&varmap);
        let n = cfg.grid.0 * cfg.grid.1;
        // Row `codebook_size` is the mask embedding.
        let tok_embed = embedding(cfg.codebook_size + 1, cfg.width, vb.pp("tok_embed"))?;
        let pos_embed = vb.get((n, cfg.width), "pos_embed")?;
        let body = Transformer::new(cfg.width, cfg.depth, cfg.heads, vb.pp("body"))?;
        let head_norm = layer_norm(cfg.width, 1e-6, vb.pp("head_norm"))?;
        let head = linear(cfg.width, cfg.codebook_size, vb.pp("head"))?;
        seeded_init(&varmap, seed)?;
        Ok(Self { cfg: cfg.clone(), varmap, tok_embed, pos_embed, body, head_norm, head })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    fn check(&self, tokens: &TokenGrid, mask: &ReliabilityMask) -> Result<()> {
        mask.check_matches(tokens)?;
        ensure!(
            tokens.grid() == self.cfg.grid,
            Validation,
            "token grid {:?} does not match predictor grid {:?}",
            tokens.grid(),
            self.cfg.grid
        );
        tokens.validate(self.cfg.codebook_size)
    }

    /// Logits `[B, n, C]`.
    fn logits(&self, tokens: &TokenGrid, mask: &ReliabilityMask) -> Result<Tensor> {
        let b = tokens.batch();
        let n = tokens.tokens_per_sample();
        let c = self.cfg.codebook_size as u32;
        let ids: Vec<u32> = tokens.ids().iter().zip(mask.bits()).map(|(&id, &m)| if m == 1 { c } else { id }).collect();
        let ids = Tensor::from_vec(ids, (b, n), &Device::Cpu)?;
        let h = self.tok_embed.forward(&ids)?.broadcast_add(&self.pos_embed)?;
        let h = self.body.forward(&h)?;
        Ok(self.head.forward(&self.head_norm.forward(&h)?)?)
    }

    /// Soft prediction of the clean grid at every position, detached from
    /// the autograd graph.
    pub fn predict(&self, tokens: &TokenGrid, mask: &ReliabilityMask) -> Result<SoftTokenDist> {
        self.check(tokens, mask)?;
        let (h, w) = tokens.grid();
        let b = tokens.batch();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < b {
            let len = INFER_CHUNK.min(b - start);
            let idx: Vec<usize> = (start..start + len).collect();
            let logits = self.logits(&tokens.select(&idx), &mask.select(&idx))?;
            parts.push(logits.reshape((len, h, w, self.cfg.codebook_size))?.detach());
            start += len;
        }
        SoftTokenDist::from_logits(&Tensor::cat(&parts, 0)?)
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            config_hash: config_hash.into(),
            config: serde_json::to_string(&self.cfg)?,
        };
        checkpoint::save_varmap(path, &meta, &self.varmap)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (meta, tensors) = checkpoint::load_tensors(path, CHECKPOINT_KIND)?;
        let cfg: PredictorConfig = serde_json::from_str(&meta.config)
            .map_err(|e| Error::checkpoint(path, format!("bad embedded config: {e}")))?;
        let p = Self::new(&cfg, 0)?;
        checkpoint::load_into_varmap(&p.varmap, &tensors, None)?;
        Ok((p, meta))
    }
}

/// Anything that maps a masked token grid to a distribution over clean tokens.
pub trait TokenEstimator {
    fn estimate(&self, tokens: &TokenGrid, mask: &ReliabilityMask) -> Result<SoftTokenDist>;
}

impl TokenEstimator for TokenPredictor {
    fn estimate(&self, tokens: &TokenGrid, mask: &ReliabilityMask) -> Result<SoftTokenDist> {
        self.predict(tokens, mask)
    }
}

/// Per-sample random masks with ratio uniform in `[lo, hi]`.
pub fn random_masks(r: &mut SeededRng, lo: f64, hi: f64, batch: usize, grid: (usize, usize)) -> ReliabilityMask {
    let n = grid.0 * grid.1;
    let mut bits = vec![0u8; batch * n];
    let mut order: Vec<usize> = (0..n).collect();
    for b in 0..batch {
        let ratio = if hi > lo { r.random_range(lo..=hi) } else { lo };
        let k = ((ratio * n as f64) + 0.5).floor().clamp(0.0, n as f64) as usize;
        order.shuffle(r);
        for &p in &order[..k] {
            bits[b * n + p] = 1;
        }
    }
    ReliabilityMask::new(bits, batch, grid.0, grid.1).expect("bits are 0/1")
}

/// Masks with exactly `round(ratio * n)` masked positions per sample.
pub fn fixed_ratio_masks(r: &mut SeededRng, ratio: f64, batch: usize, grid: (usize, usize)) -> ReliabilityMask {
    random_masks(r, ratio, ratio, batch, grid)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictorMetrics {
    pub masked_top1: f64,
    pub loss: f64,
}

/// Top-1 accuracy and mean cross-entropy on masked positions at `ratio`.
pub fn evaluate(p: &TokenPredictor, tokens: &TokenGrid, ratio: f64, seed: u64) -> Result<PredictorMetrics> {
    let mut r = rng(seed);
    let (h, w) = tokens.grid();
    let mask = fixed_ratio_masks(&mut r, ratio, tokens.batch(), (h, w));
    let rows = p.predict(tokens, &mask)?.rows()?;
    let (mut hits, mut nll, mut count) = (0usize, 0f64, 0usize);
    for (i, row) in rows.iter().enumerate() {
        if mask.bits()[i] == 0 {
            continue;
        }
        let target = tokens.ids()[i] as usize;
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        hits += usize::from(best == target);
        nll -= (row[target].max(1e-30) as f64).ln();
        count += 1;
    }
    let count = count.max(1) as f64;
    Ok(PredictorMetrics { masked_top1: hits as f64 / count, loss: nll / count })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictorReport {
    pub step_losses: Vec<f64>,
    pub held_out: PredictorMetrics,
}

pub fn train_predictor(
    train: &TokenGrid,
    val: &TokenGrid,
    cfg: &PredictorConfig,
    seed: u64,
    logger: &mut dyn StepLogger,
) -> Result<(TokenPredictor, PredictorReport)> {
    ensure!(train.batch() > 0, Dataset, "empty token dataset");
    ensure!(
        train.grid() == cfg.grid,
        Config,
        "token grid {:?} does not match predictor grid {:?}",
        train.grid(),
        cfg.grid
    );
    let model = TokenPredictor::new(cfg, derive_seed(seed, "predictor-init"))?;
    let mut r = rng(derive_seed(seed, "predictor-data"));
    let mut opt = ScheduledAdamW::new(model.varmap.all_vars(), &cfg.optimizer, cfg.steps)?;
    let bs = cfg.batch_size.min(train.batch()).max(1);
    let c = cfg.codebook_size;
    let mut order: Vec<usize> = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.len() < bs {
            order = (0..train.batch()).collect();
            order.shuffle(&mut r);
        }
        let idx: Vec<usize> = order.drain(..bs).collect();
        let z = train.select(&idx);
        let mask = random_masks(&mut r, cfg.mask_ratio_min, cfg.mask_ratio_max, bs, cfg.grid);
        let logits = model.logits(&z, &mask)?.reshape(((), c))?;
        let target = SoftTokenDist::one_hot(&z, c)?.tensor().reshape(((), c))?;
        let ce = soft_cross_entropy_rows(&logits, &target)?;
        let m = mask.to_tensor(&Device::Cpu)?.flatten_all()?;
        let weights = ((&m * (1.0 - cfg.unmasked_weight))? + cfg.unmasked_weight)?;
        let masked_loss = (ce.mul(&m)?.sum_all()? / m.sum_all()?.to_scalar::<f32>()?.max(1.0) as f64)?;
        let loss = (ce.mul(&weights)?.sum_all()? / weights.sum_all()?.to_scalar::<f32>()? as f64)?;
        let lv = masked_loss.to_scalar::<f32>()? as f64;
        ensure!(lv.is_finite(), Diverged, "predictor loss {lv} at step {step}");
        opt.backward_step(&loss)?;
        step_losses.push(lv);
        logger.log(serde_json::json!({"stage": "predictor", "step": step, "loss": lv, "lr": opt.current_lr()}));
    }
    let held_out = evaluate(&model, val, 0.5, derive_seed(seed, "predictor-eval"))?;
    logger.log(serde_json::json!({"stage": "predictor", "masked_top1": held_out.masked_top1, "loss": held_out.loss}));
    Ok((model, PredictorReport { step_losses, held_out }))
}

/// Codebook histogram of a token corpus, normalized.
pub fn token_marginal(tokens: &TokenGrid, codebook_size: usize) -> Vec<f64> {
    let mut hist = vec![0f64; codebook_size];
    for &id in tokens.ids() {
        hist[id as usize] += 1.0;
    }
    let total = tokens.ids().len().max(1) as f64;
    hist.iter_mut().for_each(|v| *v /= total);
    hist
}

/// Position-averaged predicted distribution.
pub fn mean_prediction(dist: &SoftTokenDist) -> Result<Vec<f64>> {
    let c = dist.codebook_size();
    let mean = dist.tensor().reshape(((), c))?.mean(0)?.to_dtype(candle_core::DType::F64)?;
    Ok(mean.to_vec1::<f64>()?)
}
