//! Run directories: tokenizer -> predictor -> ADDP -> generate -> eval
//! (-> recognition), each stage resuming from its checkpoint when present.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use addp::checkpoint::{self, CheckpointMeta};
use addp::data::{self, Dataset};
use addp::logging::{JsonlLogger, StepLogger};
use addp::metrics::{desk_fid, head_images, uniform_noise_images};
use addp::model::{AddpModel, Condition, TargetKind, TokenInput};
use addp::nn::{derive_seed, rng};
use addp::predictor::{train_predictor, TokenPredictor};
use addp::recognition::{
    dataset_lattices, finetune, input_mode_study, linear_probe, pixel_lattice, scratch_baseline, train_classifier,
    InputStudyReport, LatticeClassifier, RecognitionReport,
};
use addp::sampler::{generate, inpaint, outpaint, Generation, PixelMask, SamplerConfig};
use addp::schedules::{unmask_count, TimestepSampler};
use addp::tokenizer::{train_tokenizer, VqTokenizer};
use addp::trainer::{build_tuple_from_tokens, train_addp, Frozen, MappingFunction, TrainOutputs};
use addp::types::{ImageBatch, TokenGrid};
use candle_core::Tensor;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::imageio::{grid_path, save_grid};
use crate::manifest::{MetricsManifest, StageRecord};
use crate::schema;

pub const TOKENIZER_FILE: &str = "tokenizer.safetensors";
pub const PREDICTOR_FILE: &str = "predictor.safetensors";
pub const ADDP_FILE: &str = "addp.safetensors";
pub const GENERATED_FILE: &str = "generated.safetensors";
pub const FEATURE_MODEL_FILE: &str = "feature_classifier.safetensors";
pub const INPUT_STUDY_FILE: &str = "input_study.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const LOCK_FILE: &str = ".lock";
const GENERATED_KIND: &str = "generated-images";
const GENERATE_BATCH: usize = 64;
const GRID_IMAGES: usize = 64;

/// An open run directory holding the pipeline lock.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub hash: String,
    pub manifest: MetricsManifest,
    pub train: Dataset,
    pub val: Dataset,
    logger: JsonlLogger,
    tokenizer: Option<VqTokenizer>,
    predictor: Option<TokenPredictor>,
    tokens: Option<(TokenGrid, TokenGrid)>,
    addp: Option<AddpModel>,
    generated: Option<ImageBatch>,
    feature_model: Option<LatticeClassifier>,
    /// Stages that did work in this process (as opposed to resuming).
    pub executed: Vec<String>,
    _lock: File,
}

fn record(stage: &str, metrics: Value, artifacts: &[&str]) -> StageRecord {
    StageRecord { stage: stage.into(), metrics, artifacts: artifacts.iter().map(|s| s.to_string()).collect() }
}

impl Run {
    /// Opens (or creates) `dir`, taking the lock and checking that any
    /// existing run there used the same configuration.
    pub fn open(cfg: &ExperimentConfig, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash()?;
        let (train, val) = data::load(&cfg.dataset, derive_seed(cfg.seed, "split"))?;
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let lock_path = dir.join(LOCK_FILE);
        let lock = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| HarnessError::io(&lock_path, e))?;
        lock.try_lock().map_err(|_| HarnessError::Locked(dir.to_path_buf()))?;

        let hash_path = dir.join("config.hash");
        if let Ok(existing) = std::fs::read_to_string(&hash_path) {
            if existing.trim() != hash {
                return Err(HarnessError::Config(format!(
                    "{} already holds a run with config hash {}, this config hashes to {hash}",
                    dir.display(),
                    existing.trim()
                )));
            }
        } else {
            let toml_path = dir.join("config.toml");
            std::fs::write(&toml_path, cfg.to_toml()?).map_err(|e| HarnessError::io(&toml_path, e))?;
            std::fs::write(&hash_path, format!("{hash}\n")).map_err(|e| HarnessError::io(&hash_path, e))?;
        }
        let manifest = match MetricsManifest::load(dir)? {
            Some(m) if m.config_hash == hash => m,
            Some(m) => {
                return Err(HarnessError::Config(format!(
                    "manifest in {} belongs to config {}",
                    dir.display(),
                    m.config_hash
                )))
            }
            None => MetricsManifest::new(&hash, cfg.seed),
        };
        let log_path = dir.join(LOG_FILE);
        let logger = JsonlLogger::append(&log_path)?;
        Ok(Self {
            cfg: cfg.clone(),
            dir: dir.to_path_buf(),
            hash,
            manifest,
            train,
            val,
            logger,
            tokenizer: None,
            predictor: None,
            tokens: None,
            addp: None,
            generated: None,
            feature_model: None,
            executed: Vec::new(),
            _lock: lock,
        })
    }

    fn short_hash(&self) -> &str {
        &self.hash[..12]
    }

    fn done(&self, stage: &str, files: &[&str]) -> bool {
        self.manifest.record(stage).is_some() && files.iter().all(|f| self.dir.join(f).exists())
    }

    fn finish(&mut self, rec: StageRecord) -> Result<()> {
        self.executed.push(rec.stage.clone());
        self.manifest.append(&self.dir, rec)
    }

    fn stage<T>(&mut self, name: &str, body: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        body(self).map_err(|e| {
            let last = self
                .manifest
                .records
                .last()
                .map(|r| format!("{}: {}", r.stage, r.metrics))
                .unwrap_or_else(|| "none".into());
            log::error!("stage `{name}` failed; last metrics {last}");
            HarnessError::Stage { stage: name.into(), last_metrics: last, source: Box::new(e) }
        })
    }

    pub fn tokenizer(&mut self) -> Result<&VqTokenizer> {
        if self.tokenizer.is_none() {
            let tok = self.stage("tokenizer", |run| {
                let path = run.dir.join(TOKENIZER_FILE);
                if run.done("tokenizer", &[TOKENIZER_FILE]) {
                    return Ok(VqTokenizer::load(&path)?.0);
                }
                let (tok, rep) = train_tokenizer(
                    &run.train,
                    &run.val,
                    &run.cfg.tokenizer,
                    derive_seed(run.cfg.seed, "tokenizer"),
                    &mut run.logger,
                )?;
                tok.save(&path, &run.hash)?;
                let metrics = json!({
                    "psnr": rep.psnr,
                    "codebook_usage": rep.codebook_usage,
                    "collapse_warning": rep.collapse_warning,
                    "final_loss": rep.step_losses.last(),
                    "epochs": rep.epochs,
                });
                run.finish(record("tokenizer", metrics, &[TOKENIZER_FILE]))?;
                Ok(tok)
            })?;
            self.tokenizer = Some(tok);
        }
        Ok(self.tokenizer.as_ref().expect("tokenizer set above"))
    }

    /// Clean token grids for the train and validation splits.
    pub fn tokens(&mut self) -> Result<&(TokenGrid, TokenGrid)> {
        if self.tokens.is_none() {
            self.tokenizer()?;
            let tok = self.tokenizer.as_ref().expect("tokenizer loaded");
            let train = tok.encode(&self.train.all()?)?;
            let val = tok.encode(&self.val.all()?)?;
            self.tokens = Some((train, val));
        }
        Ok(self.tokens.as_ref().expect("tokens set above"))
    }

    pub fn predictor(&mut self) -> Result<&TokenPredictor> {
        if self.predictor.is_none() {
            self.tokens()?;
            let p = self.stage("predictor", |run| {
                let path = run.dir.join(PREDICTOR_FILE);
                if run.done("predictor", &[PREDICTOR_FILE]) {
                    return Ok(TokenPredictor::load(&path)?.0);
                }
                let (train, val) = run.tokens.as_ref().expect("tokens loaded");
                let (p, rep) = train_predictor(
                    train,
                    val,
                    &run.cfg.predictor,
                    derive_seed(run.cfg.seed, "predictor"),
                    &mut run.logger,
                )?;
                p.save(&path, &run.hash)?;
                let chance = 1.0 / run.cfg.predictor.codebook_size as f64;
                let metrics = json!({
                    "masked_top1": rep.held_out.masked_top1,
                    "masked_loss": rep.held_out.loss,
                    "chance": chance,
                    "final_loss": rep.step_losses.last(),
                });
                run.finish(record("predictor", metrics, &[PREDICTOR_FILE]))?;
                Ok(p)
            })?;
            self.predictor = Some(p);
        }
        Ok(self.predictor.as_ref().expect("predictor set above"))
    }

    /// Installs externally trained frozen networks (ablation runs share them).
    pub fn use_frozen(&mut self, tokenizer: VqTokenizer, predictor: TokenPredictor) {
        self.tokenizer = Some(tokenizer);
        self.predictor = Some(predictor);
    }

    pub fn addp(&mut self) -> Result<&AddpModel> {
        if self.addp.is_none() {
            self.predictor()?;
            self.tokens()?;
            let m = self.stage("addp", |run| {
                let path = run.dir.join(ADDP_FILE);
                if run.done("addp", &[ADDP_FILE]) {
                    return Ok(AddpModel::load(&path)?.0);
                }
                let tok = run.tokenizer.as_ref().expect("tokenizer loaded");
                let pred = run.predictor.as_ref().expect("predictor loaded");
                let frozen = Frozen { tokenizer: tok, predictor: pred };
                let (train, val) = run.tokens.as_ref().expect("tokens loaded");
                let outputs = TrainOutputs { dir: Some(run.dir.clone()), config_hash: run.hash.clone() };
                let (model, rep) = train_addp(
                    train,
                    val,
                    &frozen,
                    &run.cfg.model,
                    &run.cfg.trainer,
                    derive_seed(run.cfg.seed, "addp"),
                    &outputs,
                    &mut run.logger,
                )?;
                // Sample training inputs, for looking at what the model is fed.
                let sampler = TimestepSampler::new(&run.cfg.trainer.schedule)?;
                let n = GRID_IMAGES.min(train.batch());
                let idx: Vec<usize> = (0..n).collect();
                let mut r = rng(derive_seed(run.cfg.seed, "training-inputs"));
                let tuple = build_tuple_from_tokens(
                    &train.select(&idx),
                    &mut r,
                    &sampler,
                    &run.cfg.model,
                    &run.cfg.trainer,
                    &frozen,
                )?;
                let inputs = grid_path(&run.dir, "training_inputs", &run.hash[..12]);
                save_grid(&inputs, &tuple.x_t, run.cfg.eval.grid_columns)?;
                let metrics = json!({
                    "held_out_masked_loss": rep.held_out.masked_loss,
                    "held_out_masked_accuracy": rep.held_out.masked_accuracy,
                    "initial_masked_loss": rep.initial.masked_loss,
                    "uniform_loss": (run.cfg.model.codebook_size as f64).ln(),
                    "final_loss": rep.step_losses.last(),
                    "per_t_loss": rep.per_t_loss,
                });
                let inputs_name = inputs.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                run.finish(record("addp", metrics, &[ADDP_FILE, &inputs_name]))?;
                Ok(model)
            })?;
            self.addp = Some(m);
        }
        Ok(self.addp.as_ref().expect("model set above"))
    }

    /// Generates `n` images in batches; only the first batch keeps a trajectory.
    pub fn sample(
        &mut self,
        sampler: &SamplerConfig,
        n: usize,
        seed: u64,
        keep_trajectory: bool,
    ) -> Result<Generation> {
        self.addp()?;
        let model = self.addp.as_ref().expect("model loaded");
        let tok = self.tokenizer.as_ref().expect("tokenizer loaded");
        let mut r = rng(seed);
        let mut parts = Vec::new();
        let mut first: Option<Generation> = None;
        let mut start = 0;
        while start < n {
            let len = GENERATE_BATCH.min(n - start);
            let g = generate(len, model, tok, sampler, &mut r, keep_trajectory && first.is_none())?;
            parts.push(g.images.tensor().clone());
            if first.is_none() {
                first = Some(g);
            }
            start += len;
        }
        let mut g = first.ok_or_else(|| HarnessError::Config("cannot generate zero images".into()))?;
        g.images = ImageBatch::new(Tensor::cat(&parts, 0).map_err(addp::Error::from)?)?;
        Ok(g)
    }

    pub fn generate(&mut self) -> Result<&ImageBatch> {
        if self.generated.is_none() {
            self.addp()?;
            let images = self.stage("generate", |run| {
                let path = run.dir.join(GENERATED_FILE);
                if run.done("generate", &[GENERATED_FILE]) {
                    let (_, mut t) = checkpoint::load_tensors(&path, GENERATED_KIND)?;
                    let images = t
                        .remove("images")
                        .ok_or_else(|| HarnessError::Config(format!("{} has no images tensor", path.display())))?;
                    return Ok(ImageBatch::new(images)?);
                }
                let n = run.cfg.eval.generate_samples;
                let sampler = run.cfg.sampler.clone();
                let g = run.sample(&sampler, n, derive_seed(run.cfg.seed, "generate"), true)?;
                let meta = CheckpointMeta {
                    kind: GENERATED_KIND.into(),
                    config_hash: run.hash.clone(),
                    config: serde_json::to_string(&run.cfg.sampler)?,
                };
                checkpoint::save_tensors(
                    &path,
                    &meta,
                    &HashMap::from([("images".to_string(), g.images.tensor().clone())]),
                )?;
                let grid = grid_path(&run.dir, "samples", run.short_hash());
                save_grid(&grid, &g.images.narrow(0, GRID_IMAGES.min(n))?, run.cfg.eval.grid_columns)?;
                let strip = grid_path(&run.dir, "trajectory", run.short_hash());
                let frames: Vec<ImageBatch> =
                    g.trajectory.iter().map(|f| f.x.narrow(0, 1)).collect::<addp::Result<_>>()?;
                let frame_refs: Vec<&ImageBatch> = frames.iter().collect();
                save_grid(&strip, &ImageBatch::cat(&frame_refs)?, frames.len().max(1))?;
                let n_tokens = run.cfg.model.grid().0 * run.cfg.model.grid().1;
                let s = &run.cfg.sampler;
                let schedule: Vec<usize> = (1..=s.steps)
                    .rev()
                    .map(|t| unmask_count(t, s.steps, s.schedule, n_tokens))
                    .collect::<addp::Result<_>>()?;
                let metrics = json!({
                    "images": n,
                    "steps_run": g.steps_run,
                    "newly_reliable_first_batch": g.newly_reliable,
                    "masked_after_each_step": schedule,
                    "all_finite": g.images.all_finite()?,
                });
                let names: Vec<String> = [&grid, &strip]
                    .iter()
                    .map(|p| p.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string())
                    .collect();
                run.finish(record("generate", metrics, &[GENERATED_FILE, &names[0], &names[1]]))?;
                Ok(g.images)
            })?;
            self.generated = Some(images);
        }
        Ok(self.generated.as_ref().expect("images set above"))
    }

    /// Pixel classifier used as the desk-FID feature model; cached on disk.
    pub fn feature_model(&mut self) -> Result<&LatticeClassifier> {
        if self.feature_model.is_none() {
            let path = self.dir.join(FEATURE_MODEL_FILE);
            let model = if path.exists() {
                LatticeClassifier::load(&path)?.0
            } else {
                let (m, rep) = train_classifier(
                    "pixel",
                    &dataset_lattices(&self.train, pixel_lattice)?,
                    self.train.labels(),
                    &dataset_lattices(&self.val, pixel_lattice)?,
                    self.val.labels(),
                    self.train.n_classes(),
                    &self.cfg.recognition.classifier,
                    derive_seed(self.cfg.seed, "feature-model"),
                    &mut self.logger,
                )?;
                log::info!("feature classifier accuracy {:.3}", rep.accuracy);
                m.save(&path, &self.hash)?;
                m
            };
            self.feature_model = Some(model);
        }
        Ok(self.feature_model.as_ref().expect("feature model set above"))
    }

    pub fn eval(&mut self) -> Result<Value> {
        if let Some(r) = self.manifest.record("eval") {
            if self.done("eval", &[FEATURE_MODEL_FILE]) {
                return Ok(r.metrics.clone());
            }
        }
        self.generate()?;
        self.stage("eval", |run| {
            run.feature_model()?;
            let n = run.cfg.eval.fid_samples;
            let held_out = head_images(&run.val, n)?;
            let real_train = head_images(&run.train, n)?;
            let noise = uniform_noise_images(n, run.cfg.dataset.resolution, derive_seed(run.cfg.seed, "noise"))?;
            let fm = run.feature_model.as_ref().expect("feature model loaded");
            let generated = run.generated.as_ref().expect("images generated");
            let fid_generated = desk_fid(generated, &held_out, fm)?;
            let fid_noise = desk_fid(&noise, &held_out, fm)?;
            let fid_train = desk_fid(&real_train, &held_out, fm)?;
            let metrics = json!({
                "desk_fid_generated": fid_generated,
                "desk_fid_noise": fid_noise,
                "desk_fid_train_real": fid_train,
                "noise_over_generated": fid_noise / fid_generated.max(f64::MIN_POSITIVE),
            });
            run.finish(record("eval", metrics.clone(), &[FEATURE_MODEL_FILE]))?;
            Ok(metrics)
        })
    }

    fn recognition_seed(&self) -> u64 {
        derive_seed(self.cfg.seed, "recognition")
    }

    /// Linear probe on the frozen ADDP encoder.
    pub fn linear_probe(&mut self) -> Result<RecognitionReport> {
        self.addp()?;
        let model = self.addp.as_ref().expect("model loaded");
        let seed = self.recognition_seed();
        Ok(linear_probe(model, &self.train, &self.val, &self.cfg.recognition, seed, &mut self.logger)?)
    }

    /// Fine-tunes a copy of the ADDP encoder; the stored model is untouched.
    pub fn finetune(&mut self) -> Result<RecognitionReport> {
        self.addp()?;
        let tuned = self.addp.as_ref().expect("model loaded").duplicate()?;
        let seed = self.recognition_seed();
        Ok(finetune(&tuned, &self.train, &self.val, &self.cfg.recognition, seed, &mut self.logger)?)
    }

    pub fn scratch_baseline(&mut self) -> Result<RecognitionReport> {
        self.addp()?;
        let model = self.addp.as_ref().expect("model loaded");
        let seed = self.recognition_seed();
        Ok(scratch_baseline(model, &self.train, &self.val, &self.cfg.recognition, seed, &mut self.logger)?)
    }

    /// Pixel-input versus token-input classifiers; also written to `input_study.json`.
    pub fn input_study(&mut self) -> Result<InputStudyReport> {
        self.tokenizer()?;
        let tok = self.tokenizer.as_ref().expect("tokenizer loaded");
        let seed = self.recognition_seed();
        let study =
            input_mode_study(tok, &self.train, &self.val, &self.cfg.recognition.classifier, seed, &mut self.logger)?;
        let study_json = serde_json::to_value(&study)?;
        schema::validate(schema::INPUT_STUDY, &study_json)?;
        let path = self.dir.join(INPUT_STUDY_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&study_json)? + "\n")
            .map_err(|e| HarnessError::io(&path, e))?;
        Ok(study)
    }

    pub fn recognition(&mut self) -> Result<Value> {
        if let Some(r) = self.manifest.record("recognition") {
            if self.done("recognition", &[INPUT_STUDY_FILE]) {
                return Ok(r.metrics.clone());
            }
        }
        self.addp()?;
        self.stage("recognition", |run| {
            let probe = run.linear_probe()?;
            let ft = run.finetune()?;
            let scratch = run.scratch_baseline()?;
            let study = run.input_study()?;
            let metrics = json!({
                "chance": probe.chance,
                "linear_probe_accuracy": probe.accuracy,
                "finetune_accuracy": ft.accuracy,
                "scratch_accuracy": scratch.accuracy,
                "pixel_input_accuracy": study.pixel.accuracy,
                "token_input_accuracy": study.token.accuracy,
            });
            run.finish(record("recognition", metrics.clone(), &[INPUT_STUDY_FILE]))?;
            Ok(metrics)
        })
    }

    /// Regenerates `region` (or, with `outpaint`, everything outside it).
    pub fn inpaint(
        &mut self,
        image: &ImageBatch,
        region: &PixelMask,
        outpaint_mode: bool,
        seed: u64,
    ) -> Result<ImageBatch> {
        self.addp()?;
        let model = self.addp.as_ref().expect("model loaded");
        let tok = self.tokenizer.as_ref().expect("tokenizer loaded");
        let mut r = rng(seed);
        Ok(if outpaint_mode {
            outpaint(image, region, model, tok, &self.cfg.sampler, &mut r)?
        } else {
            inpaint(image, region, model, tok, &self.cfg.sampler, &mut r)?
        })
    }

    pub fn logger(&mut self) -> &mut dyn StepLogger {
        &mut self.logger
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub config_hash: String,
    pub manifest: MetricsManifest,
    pub executed: Vec<String>,
}

/// Runs every stage in order, skipping those already completed in `dir`.
pub fn run_pipeline(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    let mut run = Run::open(cfg, dir)?;
    run.eval()?;
    if cfg.eval.recognition {
        run.recognition()?;
    }
    Ok(RunSummary {
        dir: run.dir.clone(),
        config_hash: run.hash.clone(),
        manifest: run.manifest.clone(),
        executed: run.executed.clone(),
    })
}

/// One point of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationCombo {
    pub condition: Condition,
    pub mapping: MappingFunction,
    pub token_input: TokenInput,
    pub target_kind: TargetKind,
}

impl AblationCombo {
    pub fn name(&self) -> String {
        format!(
            "{}__{}__{}__{}",
            self.condition.as_str(),
            self.mapping.as_str(),
            self.token_input.as_str(),
            self.target_kind.as_str()
        )
    }

    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.model.condition = self.condition;
        c.model.token_input = self.token_input;
        c.model.target_kind = self.target_kind;
        c.trainer.mapping = self.mapping;
        c.sampler.mapping = self.mapping;
        c.eval.recognition = false;
        c
    }
}

/// Every combination of conditioning state, mapping function, token input
/// placement and target kind.
pub fn ablation_grid() -> Vec<AblationCombo> {
    let mut out = Vec::new();
    for &condition in Condition::ALL {
        for &mapping in MappingFunction::ALL {
            for &token_input in TokenInput::ALL {
                for &target_kind in TargetKind::ALL {
                    out.push(AblationCombo { condition, mapping, token_input, target_kind });
                }
            }
        }
    }
    out
}

/// Trains and samples every ablation combination in `dir/ablation/<name>`,
/// sharing the tokenizer and predictor of the base run in `dir`. Appends an
/// `ablation` summary record to the base manifest.
pub fn run_ablation(cfg: &ExperimentConfig, dir: &Path) -> Result<Value> {
    let mut base = Run::open(cfg, dir)?;
    if let Some(r) = base.manifest.record("ablation") {
        return Ok(r.metrics.clone());
    }
    base.predictor()?;
    let mut rows = Vec::new();
    for combo in ablation_grid() {
        let sub_cfg = combo.apply(cfg);
        let sub_dir = dir.join("ablation").join(combo.name());
        let mut sub = Run::open(&sub_cfg, &sub_dir)?;
        sub.use_frozen(
            VqTokenizer::load(&dir.join(TOKENIZER_FILE))?.0,
            TokenPredictor::load(&dir.join(PREDICTOR_FILE))?.0,
        );
        sub.generate()?;
        let addp = sub.manifest.record("addp").map(|r| r.metrics.clone()).unwrap_or(Value::Null);
        log::info!("ablation {} done", combo.name());
        rows.push(json!({
            "name": combo.name(),
            "condition": combo.condition.as_str(),
            "mapping": combo.mapping.as_str(),
            "token_input": combo.token_input.as_str(),
            "target_kind": combo.target_kind.as_str(),
            "config_hash": sub.hash,
            "held_out_masked_loss": addp.get("held_out_masked_loss").cloned().unwrap_or(Value::Null),
            "manifest": format!("ablation/{}/{}", combo.name(), crate::manifest::FILE_NAME),
        }));
    }
    let metrics = json!({
        "combinations": rows.len(),
        "mean_loss_by_mapping": mean_loss_by(&rows, "mapping"),
        "runs": rows,
    });
    base.finish(record("ablation", metrics.clone(), &[]))?;
    Ok(metrics)
}

fn mean_loss_by(rows: &[Value], key: &str) -> Value {
    let mut groups: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
    for row in rows {
        if let (Some(k), Some(loss)) = (row[key].as_str(), row["held_out_masked_loss"].as_f64()) {
            let e = groups.entry(k.to_string()).or_default();
            e.0 += loss;
            e.1 += 1;
        }
    }
    Value::Object(groups.into_iter().map(|(k, (sum, n))| (k, json!(sum / n as f64))).collect())
}
