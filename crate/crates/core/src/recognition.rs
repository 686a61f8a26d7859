//! Classification on top of a pretrained encoder (fine-tuning and linear
//! probing), plus a from-scratch comparison of pixel and token inputs.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{linear, Linear, VarBuilder, VarMap};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::logging::StepLogger;
use crate::macros::string_enum;
use crate::model::AddpModel;
use crate::nn::{
    argmax_rows, cross_entropy_smoothed, derive_seed, layer_norm, new_varmap_builder, rng, seeded_init, space_to_depth,
    LayerNorm, OptimizerConfig, ScheduledAdamW, SeededRng, Transformer,
};
use crate::tokenizer::VqTokenizer;
use crate::types::ImageBatch;

const CHUNK: usize = 256;

string_enum!(Pooling {
    Mean => "mean",
    /// Attention pooling with one learned query.
    Cls => "cls",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognitionConfig {
    pub pooling: Pooling,
    pub finetune_steps: usize,
    pub probe_steps: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub finetune_optimizer: OptimizerConfig,
    pub probe_optimizer: OptimizerConfig,
    /// Settings for the from-scratch lattice classifiers.
    pub classifier: ClassifierConfig,
}

impl Default for RecognitionConfig {
    fn default() -> Self {
        Self {
            pooling: Pooling::Mean,
            finetune_steps: 400,
            probe_steps: 600,
            batch_size: 64,
            label_smoothing: 0.1,
            finetune_optimizer: OptimizerConfig { peak_lr: 5e-4, warmup_steps: 40, ..Default::default() },
            probe_optimizer: OptimizerConfig {
                peak_lr: 1e-2,
                weight_decay: 0.0,
                warmup_steps: 20,
                ..Default::default()
            },
            classifier: ClassifierConfig::default(),
        }
    }
}

/// Pooling plus a linear map to class logits.
pub struct ClassifierHead {
    pooling: Pooling,
    query: Option<Tensor>,
    norm: Option<LayerNorm>,
    proj: Linear,
    n_classes: usize,
}

impl ClassifierHead {
    /// `normalize` adds a layer norm before the projection.
    pub fn new(dim: usize, n_classes: usize, pooling: Pooling, normalize: bool, vb: VarBuilder) -> Result<Self> {
        let query = match pooling {
            Pooling::Cls => Some(vb.get((1, dim), "pool_query")?),
            Pooling::Mean => None,
        };
        let norm = if normalize { Some(layer_norm(dim, 1e-6, vb.pp("norm"))?) } else { None };
        Ok(Self { pooling, query, norm, proj: linear(dim, n_classes, vb.pp("proj"))?, n_classes })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// `[B, n, d] -> [B, d]`.
    pub fn pool(&self, feats: &Tensor) -> Result<Tensor> {
        match (&self.pooling, &self.query) {
            (Pooling::Cls, Some(q)) => {
                let d = feats.dim(D::Minus1)?;
                let scores = feats.broadcast_matmul(&q.t()?)?.affine(1.0 / (d as f64).sqrt(), 0.0)?;
                let weights = candle_nn::ops::softmax(&scores, 1)?;
                Ok(weights.broadcast_mul(feats)?.sum(1)?)
            }
            _ => Ok(feats.mean(1)?),
        }
    }

    /// Logits `[B, n_classes]` from pooled features `[B, d]`.
    pub fn classify(&self, pooled: &Tensor) -> Result<Tensor> {
        let h = match &self.norm {
            Some(n) => n.forward(pooled)?,
            None => pooled.clone(),
        };
        Ok(self.proj.forward(&h)?)
    }

    /// Logits from a `[B, n, d]` feature sequence.
    pub fn forward(&self, feats: &Tensor) -> Result<Tensor> {
        self.classify(&self.pool(feats)?)
    }
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[u32]) -> Result<f64> {
    let pred = argmax_rows(logits)?;
    ensure!(pred.len() == labels.len(), Shape, "{} predictions for {} labels", pred.len(), labels.len());
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionReport {
    pub mode: String,
    pub accuracy: f64,
    pub chance: f64,
    pub step_losses: Vec<f64>,
}

fn check_classes(train: &Dataset, val: &Dataset) -> Result<usize> {
    ensure!(!train.is_empty() && !val.is_empty(), Dataset, "recognition needs non-empty train and val splits");
    ensure!(
        train.n_classes() == val.n_classes() && train.n_classes() >= 2,
        Validation,
        "class count mismatch: train has {}, val has {}",
        train.n_classes(),
        val.n_classes()
    );
    Ok(train.n_classes())
}

fn next_batch(order: &mut Vec<usize>, len: usize, bs: usize, r: &mut SeededRng) -> Vec<usize> {
    if order.len() < bs {
        *order = (0..len).collect();
        order.shuffle(r);
    }
    order.drain(..bs).collect()
}

fn sequence(feats: &Tensor) -> Result<Tensor> {
    let (b, h, w, d) = feats.dims4()?;
    Ok(feats.reshape((b, h * w, d))?)
}

fn encoder_sequence(model: &AddpModel, x: &ImageBatch) -> Result<Tensor> {
    sequence(model.encode_pixels(x)?.tensor())
}

fn eval_logits(val: &Dataset, forward: impl Fn(&ImageBatch) -> Result<Tensor>) -> Result<Tensor> {
    let mut parts = Vec::new();
    let mut start = 0;
    while start < val.len() {
        let idx: Vec<usize> = (start..(start + CHUNK).min(val.len())).collect();
        parts.push(forward(&val.batch(&idx)?)?.detach());
        start += idx.len();
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Trains the whole encoder and a fresh head; `model` is updated in place.
pub fn finetune(
    model: &AddpModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &RecognitionConfig,
    seed: u64,
    logger: &mut dyn StepLogger,
) -> Result<RecognitionReport> {
    finetune_as("finetune", model, train, val, cfg, seed, logger)
}

/// Fine-tunes a randomly initialized copy of the architecture with the same budget.
pub fn scratch_baseline(
    model_like: &AddpModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &RecognitionConfig,
    seed: u64,
    logger: &mut dyn StepLogger,
) -> Result<RecognitionReport> {
    let fresh = AddpModel::new(model_like.config(), derive_seed(seed, "scratch-init"))?;
    finetune_as("scratch", &fresh, train, val, cfg, seed, logger)
}

fn finetune_as(
    mode: &str,
    model: &AddpModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &RecognitionConfig,
    seed: u64,
    logger: &mut dyn StepLogger,
) -> Result<RecognitionReport> {
    let classes = check_classes(train, val)?;
    let head_vars = VarMap::new();
    let head = ClassifierHead::new(
        model.config().d_model,
        classes,
        cfg.pooling,
        true,
        new_varmap_builder(&head_vars).pp("head"),
    )?;
    seeded_init(&head_vars, derive_seed(seed, "finetune-head"))?;
    let mut vars = model.encoder_vars();
    vars.extend(head_vars.all_vars());
    let mut opt = ScheduledAdamW::new(vars, &cfg.finetune_optimizer, cfg.finetune_steps)?;
    let mut r = rng(derive_seed(seed, "finetune-data"));
    let bs = cfg.batch_size.min(train.len()).max(1);
    let mut order = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.finetune_steps);
    for step in 0..cfg.finetune_steps {
        let idx = next_batch(&mut order, train.len(), bs, &mut r);
        let labels: Vec<u32> = idx.iter().map(|&i| train.labels()[i]).collect();
        let logits = head.forward(&encoder_sequence(model, &train.batch(&idx)?)?)?;
        let loss = cross_entropy_smoothed(&logits, &labels, cfg.label_smoothing)?;
        let lv = loss.to_scalar::<f32>()? as f64;
        ensure!(lv.is_finite(), Diverged, "{mode} loss {lv} at step {step}");
        opt.backward_step(&loss)?;
        step_losses.push(lv);
        logger.log(serde_json::json!({"stage": mode, "step": step, "loss": lv}));
    }
    let logits = eval_logits(val, |x| head.forward(&encoder_sequence(model, x)?))?;
    let acc = accuracy(&logits, val.labels())?;
    logger.log(serde_json::json!({"stage": mode, "accuracy": acc}));
    Ok(RecognitionReport { mode: mode.into(), accuracy: acc, chance: 1.0 / classes as f64, step_losses })
}

/// Standardization statistics of pooled features, fit on the training split.
fn standardizer(feats: &Tensor) -> Result<(Tensor, Tensor)> {
    let mean = feats.mean_keepdim(0)?;
    let std = feats.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?.affine(1.0, 1e-6)?.sqrt()?;
    Ok((mean, std))
}

fn frozen_features(model: &AddpModel, data: &Dataset, pooling: Pooling) -> Result<Tensor> {
    eval_logits(data, |x| {
        let seq = encoder_sequence(model, x)?;
        match pooling {
            Pooling::Mean => Ok(seq.mean(1)?),
            Pooling::Cls => Ok(seq),
        }
    })
}

/// Trains only a linear head on frozen encoder features. Features are
/// standardized with training-split statistics, which keeps the probe affine.
pub fn linear_probe(
    model: &AddpModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &RecognitionConfig,
    seed: u64,
    logger: &mut dyn StepLogger,
) -> Result<RecognitionReport> {
    let classes = check_classes(train, val)?;
    let head_vars = VarMap::new();
    let head = ClassifierHead::new(
        model.config().d_model,
        classes,
        cfg.pooling,
        false,
        new_varmap_builder(&head_vars).pp("probe"),
    )?;
    seeded_init(&head_vars, derive_seed(seed, "probe-head"))?;
    let train_feats = frozen_features(model, train, cfg.pooling)?;
    let val_feats = frozen_features(model, val, cfg.pooling)?;
    let pooled_train = match cfg.pooling {
        Pooling::Mean => train_feats.clone(),
        Pooling::Cls => train_feats.mean(1)?,
    };
    let (mean, std) = standardizer(&pooled_train)?;
    let logits_of = |feats: &Tensor| -> Result<Tensor> {
        let pooled = match cfg.pooling {
            Pooling::Mean => feats.clone(),
            Pooling::Cls => head.pool(feats)?,
        };
        head.classify(&pooled.broadcast_sub(&mean)?.broadcast_div(&std)?)
    };
    let mut opt = ScheduledAdamW::new(head_vars.all_vars(), &cfg.probe_optimizer, cfg.probe_steps)?;
    let mut r = rng(derive_seed(seed, "probe-data"));
    let bs = cfg.batch_size.min(train.len()).max(1);
    let mut order = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.probe_steps);
    for step in 0..cfg.probe_steps {
        let idx = next_batch(&mut order, train.len(), bs, &mut r);
        let labels: Vec<u32> = idx.iter().map(|&i| train.labels()[i]).collect();
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        let loss = cross_entropy_smoothed(&logits_of(&train_feats.index_select(&ids, 0)?)?, &labels, 0.0)?;
        let lv = loss.to_scalar::<f32>()? as f64;
        ensure!(lv.is_finite(), Diverged, "linear probe loss {lv} at step {step}");
        opt.backward_step(&loss)?;
        step_losses.push(lv);
        logger.log(serde_json::json!({"stage": "linear_probe", "step": step, "loss": lv}));
    }
    let acc = accuracy(&logits_of(&val_feats)?, val.labels())?;
    logger.log(serde_json::json!({"stage": "linear_probe", "accuracy": acc}));
    Ok(RecognitionReport { mode: "linear_probe".into(), accuracy: acc, chance: 1.0 / classes as f64, step_losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            width: 96,
            depth: 2,
            heads: 4,
            steps: 600,
            batch_size: 64,
            optimizer: OptimizerConfig { peak_lr: 1e-3, warmup_steps: 30, ..Default::default() },
        }
    }
}

pub const CLASSIFIER_KIND: &str = "lattice-classifier";
/// Side of the pixel patch folded into one lattice cell.
pub const PIXEL_PATCH: usize = 4;

/// Small transformer classifier over a `[B, h, w, in_dim]` lattice.
pub struct LatticeClassifier {
    cfg: ClassifierConfig,
    grid: (usize, usize),
    in_dim: usize,
    n_classes: usize,
    proj: Linear,
    pos: Tensor,
    body: Transformer,
    head: ClassifierHead,
    varmap: VarMap,
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    cfg: ClassifierConfig,
    grid: (usize, usize),
    in_dim: usize,
    n_classes: usize,
}

impl LatticeClassifier {
    pub fn new(
        cfg: &ClassifierConfig,
        grid: (usize, usize),
        in_dim: usize,
        n_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        ensure!(cfg.width.is_multiple_of(cfg.heads), Config, "classifier width must divide by heads");
        let varmap = VarMap::new();
        let vb = new_varmap_builder(&varmap);
        let n = grid.0 * grid.1;
        let c = Self {
            cfg: cfg.clone(),
            grid,
            in_dim,
            n_classes,
            proj: linear(in_dim, cfg.width, vb.pp("proj"))?,
            pos: vb.get((n, cfg.width), "pos_embed")?,
            body: Transformer::new(cfg.width, cfg.depth, cfg.heads, vb.pp("body"))?,
            head: ClassifierHead::new(cfg.width, n_classes, Pooling::Mean, true, vb.pp("head"))?,
            varmap,
        };
        seeded_init(&c.varmap, seed)?;
        Ok(c)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    fn check(&self, lattice: &Tensor) -> Result<usize> {
        let (b, h, w, d) = lattice.dims4()?;
        ensure!(
            (h, w) == self.grid && d == self.in_dim,
            Shape,
            "lattice [{h}, {w}, {d}] does not match classifier input [{}, {}, {}]",
            self.grid.0,
            self.grid.1,
            self.in_dim
        );
        Ok(b)
    }

    /// Pooled penultimate features `[B, width]`.
    pub fn features(&self, lattice: &Tensor) -> Result<Tensor> {
        let b = self.check(lattice)?;
        let n = self.grid.0 * self.grid.1;
        let h = self.proj.forward(&lattice.reshape((b, n, self.in_dim))?)?.broadcast_add(&self.pos)?;
        self.head.pool(&self.body.forward(&h)?)
    }

    pub fn logits(&self, lattice: &Tensor) -> Result<Tensor> {
        self.head.classify(&self.features(lattice)?)
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let meta = CheckpointMeta {
            kind: CLASSIFIER_KIND.into(),
            config_hash: config_hash.into(),
            config: serde_json::to_string(&ClassifierMeta {
                cfg: self.cfg.clone(),
                grid: self.grid,
                in_dim: self.in_dim,
                n_classes: self.n_classes,
            })?,
        };
        checkpoint::save_varmap(path, &meta, &self.varmap)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (meta, tensors) = checkpoint::load_tensors(path, CLASSIFIER_KIND)?;
        let m: ClassifierMeta = serde_json::from_str(&meta.config)
            .map_err(|e| Error::checkpoint(path, format!("bad embedded config: {e}")))?;
        let c = Self::new(&m.cfg, m.grid, m.in_dim, m.n_classes, 0)?;
        checkpoint::load_into_varmap(&c.varmap, &tensors, None)?;
        Ok((c, meta))
    }
}

/// `[B, 3, H, W]` pixels folded into a `[B, H/4, W/4, 48]` lattice.
pub fn pixel_lattice(x: &ImageBatch) -> Result<Tensor> {
    space_to_depth(&x.tensor().permute((0, 2, 3, 1))?.contiguous()?, PIXEL_PATCH)
}

/// Lattices for a whole dataset, computed in chunks.
pub fn dataset_lattices(data: &Dataset, make: impl Fn(&ImageBatch) -> Result<Tensor>) -> Result<Tensor> {
    eval_logits(data, |x| make(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub input: String,
    /// Lattice shape `[h, w, channels]` consumed by the classifier.
    pub input_shape: [usize; 3],
    pub accuracy: f64,
    pub step_losses: Vec<f64>,
}

/// Trains a lattice classifier from scratch on precomputed lattices.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    name: &str,
    train: &Tensor,
    train_labels: &[u32],
    val: &Tensor,
    val_labels: &[u32],
    n_classes: usize,
    cfg: &ClassifierConfig,
    seed: u64,
    logger: &mut dyn StepLogger,
) -> Result<(LatticeClassifier, ClassifierReport)> {
    let (count, h, w, d) = train.dims4()?;
    ensure!(count == train_labels.len() && count > 0, Dataset, "{count} lattices for {} labels", train_labels.len());
    let model = LatticeClassifier::new(cfg, (h, w), d, n_classes, derive_seed(seed, &format!("{name}-init")))?;
    let mut opt = ScheduledAdamW::new(model.varmap.all_vars(), &cfg.optimizer, cfg.steps)?;
    let mut r = rng(derive_seed(seed, &format!("{name}-data")));
    let bs = cfg.batch_size.min(count).max(1);
    let mut order = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = next_batch(&mut order, count, bs, &mut r);
        let labels: Vec<u32> = idx.iter().map(|&i| train_labels[i]).collect();
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        let loss = cross_entropy_smoothed(&model.logits(&train.index_select(&ids, 0)?)?, &labels, 0.1)?;
        let lv = loss.to_scalar::<f32>()? as f64;
        ensure!(lv.is_finite(), Diverged, "{name} classifier loss {lv} at step {step}");
        opt.backward_step(&loss)?;
        step_losses.push(lv);
        logger.log(serde_json::json!({"stage": name, "step": step, "loss": lv}));
    }
    let mut parts = Vec::new();
    let mut start = 0;
    let total = val.dim(0)?;
    while start < total {
        let len = CHUNK.min(total - start);
        parts.push(model.logits(&val.narrow(0, start, len)?)?.detach());
        start += len;
    }
    let acc = accuracy(&Tensor::cat(&parts, 0)?, val_labels)?;
    logger.log(serde_json::json!({"stage": name, "accuracy": acc}));
    Ok((model, ClassifierReport { input: name.into(), input_shape: [h, w, d], accuracy: acc, step_losses }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputStudyReport {
    pub n_classes: usize,
    pub chance: f64,
    pub pixel: ClassifierReport,
    pub token: ClassifierReport,
    /// Pixel accuracy is at least the token accuracy.
    pub pixel_at_least_token: bool,
}

/// Identical classifiers trained from scratch on pixel lattices and on the
/// frozen tokenizer's code-embedding lattices.
pub fn input_mode_study(
    tokenizer: &VqTokenizer,
    train: &Dataset,
    val: &Dataset,
    cfg: &ClassifierConfig,
    seed: u64,
    logger: &mut dyn StepLogger,
) -> Result<InputStudyReport> {
    let classes = check_classes(train, val)?;
    let (_, pixel) = train_classifier(
        "pixel",
        &dataset_lattices(train, pixel_lattice)?,
        train.labels(),
        &dataset_lattices(val, pixel_lattice)?,
        val.labels(),
        classes,
        cfg,
        seed,
        logger,
    )?;
    let embed = |x: &ImageBatch| tokenizer.embed_image(x);
    let (_, token) = train_classifier(
        "token",
        &dataset_lattices(train, embed)?,
        train.labels(),
        &dataset_lattices(val, embed)?,
        val.labels(),
        classes,
        cfg,
        seed,
        logger,
    )?;
    Ok(InputStudyReport {
        n_classes: classes,
        chance: 1.0 / classes as f64,
        pixel_at_least_token: pixel.accuracy >= token.accuracy,
        pixel,
        token,
    })
}

/// Snapshot of every encoder weight, for freeze checks.
pub fn encoder_snapshot(model: &AddpModel) -> Result<Vec<Vec<f32>>> {
    model
        .encoder_vars()
        .iter()
        .map(|v| Ok(v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::shapes;
    use crate::logging::NullLogger;
    use crate::model::ModelConfig;

    fn small_model() -> AddpModel {
        AddpModel::new(&ModelConfig { d_model: 32, encoder_depth: 1, decoder_depth: 1, ..Default::default() }, 0)
            .unwrap()
    }

    fn quick() -> RecognitionConfig {
        RecognitionConfig { finetune_steps: 8, probe_steps: 8, batch_size: 16, ..Default::default() }
    }

    #[test]
    fn accuracy_matches_brute_force() {
        let mut r = rng(3);
        let logits = Tensor::randn(0f32, 1., (100, 10), &Device::Cpu).unwrap();
        let labels: Vec<u32> = (0..100).map(|_| rand::Rng::random_range(&mut r, 0..10)).collect();
        let rows = logits.to_vec2::<f32>().unwrap();
        let mut hits = 0;
        for (row, &l) in rows.iter().zip(&labels) {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            hits += usize::from(best as u32 == l);
        }
        assert_eq!(accuracy(&logits, &labels).unwrap(), hits as f64 / 100.0);
    }

    #[test]
    fn probe_leaves_encoder_untouched() {
        let data = shapes(96, 32, 1).unwrap();
        let (train, val) = data.split(64, 32, 0).unwrap();
        let model = small_model();
        for &pooling in Pooling::ALL {
            let before = encoder_snapshot(&model).unwrap();
            let cfg = RecognitionConfig { pooling, ..quick() };
            let rep = linear_probe(&model, &train, &val, &cfg, 0, &mut NullLogger).unwrap();
            assert!((0.0..=1.0).contains(&rep.accuracy));
            assert_eq!(before, encoder_snapshot(&model).unwrap());
        }
    }

    #[test]
    fn finetune_updates_encoder() {
        let data = shapes(96, 32, 1).unwrap();
        let (train, val) = data.split(64, 32, 0).unwrap();
        let model = small_model();
        let copy = model.duplicate().unwrap();
        let before = encoder_snapshot(&model).unwrap();
        finetune(&model, &train, &val, &quick(), 0, &mut NullLogger).unwrap();
        assert_ne!(before, encoder_snapshot(&model).unwrap());
        assert_eq!(before, encoder_snapshot(&copy).unwrap());
    }

    #[test]
    fn class_mismatch_is_rejected() {
        let a = shapes(32, 32, 0).unwrap();
        let b = Dataset::new(vec![0.0; 2 * 3 * 32 * 32], vec![0, 1], 2, 32).unwrap();
        let model = small_model();
        assert!(matches!(linear_probe(&model, &a, &b, &quick(), 0, &mut NullLogger), Err(Error::Validation(_))));
    }

    #[test]
    fn cls_pooling_weights_sum_to_one() {
        let vm = VarMap::new();
        let head = ClassifierHead::new(8, 3, Pooling::Cls, false, new_varmap_builder(&vm)).unwrap();
        seeded_init(&vm, 0).unwrap();
        let same = Tensor::ones((2, 5, 8), DType::F32, &Device::Cpu).unwrap();
        let pooled = head.pool(&same).unwrap().to_vec2::<f32>().unwrap();
        for row in pooled {
            for v in row {
                assert!((v - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn lattices_have_expected_shapes() {
        let x = shapes(4, 32, 0).unwrap().all().unwrap();
        assert_eq!(pixel_lattice(&x).unwrap().dims(), &[4, 8, 8, 48]);
        let tok = VqTokenizer::new(&Default::default(), 0).unwrap();
        assert_eq!(tok.embed_image(&x).unwrap().dims(), &[4, 8, 8, 16]);
    }
}
