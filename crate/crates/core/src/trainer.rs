//! Training loop for the pixel-to-token network. Each step draws a timestep
//! pair, builds nested masks, renders the noisy image from the frozen
//! tokenizer and predictor, and regresses the model onto the token target.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::logging::StepLogger;
use crate::macros::string_enum;
use crate::model::{masked_accuracy, masked_ce_from_logits, AddpModel, Condition, ModelConfig, TargetKind};
use crate::nn::{derive_seed, rng, OptimizerConfig, ScheduledAdamW, SeededRng};
use crate::predictor::TokenEstimator;
use crate::schedules::{make_nested_masks, mask_ratio_clamped, ScheduleConfig, TimestepDraw, TimestepSampler};
use crate::tokenizer::VqTokenizer;
use crate::types::{ImageBatch, ReliabilityMask, SoftTokenDist, TokenGrid};

string_enum!(MappingFunction {
    Sampling => "sampling",
    ArgMax => "argmax",
    WeightedSum => "weighted_sum",
});

string_enum!(TargetSource {
    /// Prediction from the less-masked state `(z_t, m_t)`.
    Current => "current",
    /// Prediction from the state the image was rendered from.
    Noisier => "noisier",
});

/// Maps a token distribution to the soft input of mixed decoding.
pub fn apply_mapping(f: MappingFunction, dist: &SoftTokenDist, r: &mut SeededRng) -> Result<SoftTokenDist> {
    let (b, h, w, c) = dist.dims();
    match f {
        MappingFunction::WeightedSum => Ok(dist.clone()),
        MappingFunction::ArgMax => SoftTokenDist::one_hot(&dist.argmax()?, c),
        MappingFunction::Sampling => {
            let ids = dist.rows()?.iter().map(|row| sample_row(row, r)).collect();
            SoftTokenDist::one_hot(&TokenGrid::new(ids, b, h, w)?, c)
        }
    }
}

/// Inverse-CDF draw from one probability row.
pub(crate) fn sample_row(row: &[f32], r: &mut SeededRng) -> u32 {
    let total: f64 = row.iter().map(|&p| p as f64).sum();
    let u: f64 = r.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p as f64;
        if u < acc {
            return i as u32;
        }
    }
    last as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub schedule: ScheduleConfig,
    pub mapping: MappingFunction,
    pub target_source: TargetSource,
    /// Applied to hard targets only.
    pub label_smoothing: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub histogram_bins: usize,
    pub eval_samples: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            mapping: MappingFunction::WeightedSum,
            target_source: TargetSource::Current,
            label_smoothing: 0.1,
            steps: 2000,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            checkpoint_every: 0,
            histogram_bins: 10,
            eval_samples: 512,
        }
    }
}

/// Frozen networks used to synthesize training inputs and targets.
pub struct Frozen<'a> {
    pub tokenizer: &'a VqTokenizer,
    pub predictor: &'a dyn TokenEstimator,
}

#[derive(Debug, Clone)]
pub struct TrainingTuple {
    pub draws: Vec<TimestepDraw>,
    pub z0: TokenGrid,
    pub z_t: TokenGrid,
    pub z_shifted: TokenGrid,
    pub m_t: ReliabilityMask,
    pub m_shifted: ReliabilityMask,
    pub x_t: ImageBatch,
    pub target: SoftTokenDist,
}

/// `z` with masked entries set to 0; masked ids are never read downstream.
fn apply_mask(z: &TokenGrid, m: &ReliabilityMask) -> TokenGrid {
    let mut out = z.clone();
    for (id, &bit) in out.ids_mut().iter_mut().zip(m.bits()) {
        if bit == 1 {
            *id = 0;
        }
    }
    out
}

/// Per-sample nested masks for a list of timestep draws.
pub fn nested_masks_for(
    r: &mut SeededRng,
    draws: &[TimestepDraw],
    schedule: &ScheduleConfig,
    grid: (usize, usize),
) -> Result<(ReliabilityMask, ReliabilityMask)> {
    let n = grid.0 * grid.1;
    let mut lo = Vec::with_capacity(draws.len() * n);
    let mut hi = Vec::with_capacity(draws.len() * n);
    for d in draws {
        let r_lo = mask_ratio_clamped(d.t, schedule.steps, schedule.schedule)?;
        let r_hi = mask_ratio_clamped(d.shifted(schedule.steps), schedule.steps, schedule.schedule)?;
        let (a, b) = make_nested_masks(r, r_lo, r_hi, grid, 1)?;
        lo.extend_from_slice(a.bits());
        hi.extend_from_slice(b.bits());
    }
    Ok((ReliabilityMask::new(lo, draws.len(), grid.0, grid.1)?, ReliabilityMask::new(hi, draws.len(), grid.0, grid.1)?))
}

/// Builds one training tuple from clean tokens.
pub fn build_tuple_from_tokens(
    z0: &TokenGrid,
    r: &mut SeededRng,
    sampler: &TimestepSampler,
    model_cfg: &ModelConfig,
    cfg: &TrainerConfig,
    frozen: &Frozen<'_>,
) -> Result<TrainingTuple> {
    let draws: Vec<TimestepDraw> = (0..z0.batch()).map(|_| sampler.sample(r)).collect();
    build_tuple_with_draws(z0, draws, r, model_cfg, cfg, frozen)
}

pub fn build_tuple_with_draws(
    z0: &TokenGrid,
    draws: Vec<TimestepDraw>,
    r: &mut SeededRng,
    model_cfg: &ModelConfig,
    cfg: &TrainerConfig,
    frozen: &Frozen<'_>,
) -> Result<TrainingTuple> {
    ensure!(draws.len() == z0.batch(), Shape, "one timestep draw per sample required");
    let c = frozen.tokenizer.codebook_size();
    let (m_t, m_shifted) = nested_masks_for(r, &draws, &cfg.schedule, z0.grid())?;
    let z_t = apply_mask(z0, &m_t);
    let z_shifted = apply_mask(z0, &m_shifted);

    let shifted_pred = || frozen.predictor.estimate(&z_shifted, &m_shifted);
    let current_pred = || frozen.predictor.estimate(&z_t, &m_t);
    let source = match model_cfg.condition {
        Condition::Zt1 => shifted_pred()?,
        Condition::Zt => current_pred()?,
    };
    let soft = apply_mapping(cfg.mapping, &source, r)?;
    let x_t = frozen.tokenizer.decode_mixed(&z_t, &soft, &m_t)?;
    let target = match model_cfg.target_kind {
        TargetKind::HardZ0 => SoftTokenDist::one_hot(z0, c)?,
        TargetKind::SoftPredictor | TargetKind::Both => match (cfg.target_source, model_cfg.condition) {
            (TargetSource::Noisier, Condition::Zt1) | (TargetSource::Current, Condition::Zt) => source,
            (TargetSource::Noisier, Condition::Zt) => shifted_pred()?,
            (TargetSource::Current, Condition::Zt1) => current_pred()?,
        },
    };
    Ok(TrainingTuple { draws, z0: z0.clone(), z_t, z_shifted, m_t, m_shifted, x_t, target })
}

/// Builds a tuple from clean images (encodes them first).
pub fn build_training_tuple(
    x0: &ImageBatch,
    r: &mut SeededRng,
    sampler: &TimestepSampler,
    model_cfg: &ModelConfig,
    cfg: &TrainerConfig,
    frozen: &Frozen<'_>,
) -> Result<TrainingTuple> {
    let z0 = frozen.tokenizer.encode(x0)?;
    build_tuple_from_tokens(&z0, r, sampler, model_cfg, cfg, frozen)
}

fn smoothed_one_hot(z: &TokenGrid, c: usize, smoothing: f64) -> Result<Tensor> {
    let off = (smoothing / c as f64) as f32;
    let on = (1.0 - smoothing) as f32 + off;
    let mut v = vec![off; z.ids().len() * c];
    for (i, &id) in z.ids().iter().enumerate() {
        v[i * c + id as usize] = on;
    }
    Ok(Tensor::from_vec(v, (z.ids().len(), c), &Device::Cpu)?)
}

pub struct StepLoss {
    pub loss: Tensor,
    pub per_sample: Vec<f64>,
    pub masked_accuracy: f64,
}

/// Loss of `model` on a tuple. `per_sample` holds each sample's masked loss.
pub fn tuple_loss(model: &AddpModel, tuple: &TrainingTuple, cfg: &TrainerConfig) -> Result<StepLoss> {
    let c = model.config().codebook_size;
    let logits = model.forward_logits(&tuple.x_t, &tuple.z_t, &tuple.m_t)?;
    let soft_target = tuple.target.tensor().reshape(((), c))?;
    let hard_target = smoothed_one_hot(&tuple.z0, c, cfg.label_smoothing)?;
    let mask = tuple.m_t.bits();
    let loss = match model.config().target_kind {
        TargetKind::SoftPredictor => masked_ce_from_logits(&logits, &soft_target, mask)?,
        TargetKind::HardZ0 => masked_ce_from_logits(&logits, &hard_target, mask)?,
        TargetKind::Both => {
            (masked_ce_from_logits(&logits, &soft_target, mask)? + masked_ce_from_logits(&logits, &hard_target, mask)?)?
        }
    };
    let n = tuple.m_t.tokens_per_sample();
    let mut per_sample = Vec::with_capacity(tuple.z0.batch());
    let rows = logits.detach();
    let target = match model.config().target_kind {
        TargetKind::HardZ0 => hard_target,
        _ => soft_target,
    };
    for b in 0..tuple.z0.batch() {
        let l = masked_ce_from_logits(&rows.narrow(0, b * n, n)?, &target.narrow(0, b * n, n)?, tuple.m_t.sample(b))?;
        per_sample.push(l.to_scalar::<f32>()? as f64);
    }
    Ok(StepLoss { loss, per_sample, masked_accuracy: masked_accuracy(&logits, &tuple.z0, &tuple.m_t)? })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossHistogram {
    /// Inclusive lower `t` of each bin.
    pub bin_start: Vec<usize>,
    pub mean_loss: Vec<f64>,
    pub count: Vec<usize>,
}

impl LossHistogram {
    fn new(total: usize, bins: usize) -> Self {
        let bins = bins.clamp(1, total.max(1));
        Self {
            bin_start: (0..bins).map(|i| 1 + i * total / bins).collect(),
            mean_loss: vec![0.0; bins],
            count: vec![0; bins],
        }
    }

    fn add(&mut self, t: usize, loss: f64) {
        let bin = self.bin_start.iter().rposition(|&s| s <= t).unwrap_or(0);
        self.count[bin] += 1;
        let k = self.count[bin] as f64;
        self.mean_loss[bin] += (loss - self.mean_loss[bin]) / k;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalMetrics {
    pub masked_loss: f64,
    pub masked_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AddpReport {
    pub step_losses: Vec<f64>,
    pub initial: EvalMetrics,
    pub held_out: EvalMetrics,
    pub per_t_loss: LossHistogram,
}

/// Mean masked loss and accuracy on held-out tokens with tuples drawn from a fixed seed.
pub fn evaluate(
    model: &AddpModel,
    tokens: &TokenGrid,
    cfg: &TrainerConfig,
    frozen: &Frozen<'_>,
    seed: u64,
) -> Result<EvalMetrics> {
    let sampler = TimestepSampler::new(&cfg.schedule)?;
    let mut r = rng(seed);
    let n = tokens.batch().min(cfg.eval_samples.max(1));
    let bs = cfg.batch_size.max(1);
    let (mut loss, mut acc, mut seen) = (0.0, 0.0, 0usize);
    let mut start = 0;
    while start < n {
        let len = bs.min(n - start);
        let idx: Vec<usize> = (start..start + len).collect();
        let tuple = build_tuple_from_tokens(&tokens.select(&idx), &mut r, &sampler, model.config(), cfg, frozen)?;
        let out = tuple_loss(model, &tuple, cfg)?;
        loss += out.per_sample.iter().sum::<f64>();
        acc += out.masked_accuracy * len as f64;
        seen += len;
        start += len;
    }
    Ok(EvalMetrics { masked_loss: loss / seen.max(1) as f64, masked_accuracy: acc / seen.max(1) as f64 })
}

#[derive(Debug, Clone, Serialize)]
struct DivergenceDump<'a> {
    step: usize,
    loss: f64,
    t: Vec<usize>,
    delta_t: Vec<usize>,
    z0: &'a [u32],
    m_t: &'a [u8],
    m_shifted: &'a [u8],
    x_t_finite: bool,
}

/// Where checkpoints and diagnostics go.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
    pub config_hash: String,
}

impl TrainOutputs {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

fn dump_divergence(path: &Path, step: usize, loss: f64, t: &TrainingTuple) -> Result<()> {
    let dump = DivergenceDump {
        step,
        loss,
        t: t.draws.iter().map(|d| d.t).collect(),
        delta_t: t.draws.iter().map(|d| d.delta_t).collect(),
        z0: t.z0.ids(),
        m_t: t.m_t.bits(),
        m_shifted: t.m_shifted.bits(),
        x_t_finite: t.x_t.all_finite()?,
    };
    std::fs::write(path, serde_json::to_vec_pretty(&dump)?).map_err(|e| Error::io(path, e))
}

/// Trains a fresh model on clean `train` tokens.
#[allow(clippy::too_many_arguments)]
pub fn train_addp(
    train: &TokenGrid,
    val: &TokenGrid,
    frozen: &Frozen<'_>,
    model_cfg: &ModelConfig,
    cfg: &TrainerConfig,
    seed: u64,
    outputs: &TrainOutputs,
    logger: &mut dyn StepLogger,
) -> Result<(AddpModel, AddpReport)> {
    ensure!(train.batch() > 0, Dataset, "empty training token set");
    ensure!(
        model_cfg.codebook_size == frozen.tokenizer.codebook_size(),
        Config,
        "model codebook {} differs from tokenizer codebook {}",
        model_cfg.codebook_size,
        frozen.tokenizer.codebook_size()
    );
    let model = AddpModel::new(model_cfg, derive_seed(seed, "addp-init"))?;
    let sampler = TimestepSampler::new(&cfg.schedule)?;
    let eval_seed = derive_seed(seed, "addp-eval");
    let initial = evaluate(&model, val, cfg, frozen, eval_seed)?;
    logger.log(serde_json::json!({"stage": "addp", "step": 0, "held_out_masked_loss": initial.masked_loss}));

    let mut r = rng(derive_seed(seed, "addp-data"));
    let mut opt = ScheduledAdamW::new(model.varmap().all_vars(), &cfg.optimizer, cfg.steps)?;
    let bs = cfg.batch_size.min(train.batch()).max(1);
    let mut hist = LossHistogram::new(cfg.schedule.steps, cfg.histogram_bins);
    let mut step_losses = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        if order.len() < bs {
            order = (0..train.batch()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        }
        let idx: Vec<usize> = order.drain(..bs).collect();
        let tuple = build_tuple_from_tokens(&train.select(&idx), &mut r, &sampler, model_cfg, cfg, frozen)?;
        let out = tuple_loss(&model, &tuple, cfg)?;
        let lv = out.loss.to_scalar::<f32>()? as f64;
        if !lv.is_finite() {
            let mut msg = format!("loss {lv} at step {step}");
            if let Some(p) = outputs.path("diverged_tuple.json") {
                dump_divergence(&p, step, lv, &tuple)?;
                msg.push_str(&format!("; tuple written to {}", p.display()));
            }
            return Err(Error::Diverged(msg));
        }
        opt.backward_step(&out.loss)?;
        for (d, l) in tuple.draws.iter().zip(&out.per_sample) {
            hist.add(d.t, *l);
        }
        step_losses.push(lv);
        logger.log(serde_json::json!({
            "stage": "addp",
            "step": step + 1,
            "loss": lv,
            "masked_accuracy": out.masked_accuracy,
            "lr": opt.current_lr(),
        }));
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            if let Some(p) = outputs.path(&format!("addp_step{:06}.safetensors", step + 1)) {
                model.save(&p, &outputs.config_hash)?;
            }
        }
    }
    if let Some(p) = outputs.path("addp.safetensors") {
        model.save(&p, &outputs.config_hash)?;
    }
    let held_out = evaluate(&model, val, cfg, frozen, eval_seed)?;
    logger.log(serde_json::json!({
        "stage": "addp",
        "held_out_masked_loss": held_out.masked_loss,
        "held_out_masked_accuracy": held_out.masked_accuracy,
        "per_t_loss": &hist,
    }));
    Ok((model, AddpReport { step_losses, initial, held_out, per_t_loss: hist }))
}
