use std::path::{Path, PathBuf};

use addp::calculus::verify_random_specs;
use addp::schedules::{unmask_count, MaskSchedule};
use addp::trainer::MappingFunction;
use addp_harness::imageio::{grid_path, load_image, load_mask, save_grid};
use addp_harness::pipeline::{run_ablation, run_pipeline, Run};
use addp_harness::{schema, ExperimentConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

/// Alternating denoising diffusion experiments on a desk-scale image corpus.
#[derive(Parser)]
#[command(name = "addp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Run directory; defaults to the config's `output_dir`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

impl RunArgs {
    fn open(&self) -> Result<Run> {
        let (cfg, dir) = self.load()?;
        Ok(Run::open(&cfg, &dir)?)
    }

    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let cfg = ExperimentConfig::load(&self.config)?;
        let dir = self.run_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok((cfg, dir))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) the VQ tokenizer.
    TrainTokenizer(RunArgs),
    /// Train (or resume) the masked token predictor.
    TrainPredictor(RunArgs),
    /// Train (or resume) the pixel-to-token model.
    TrainAddp(RunArgs),
    /// Sample images and write a PNG grid.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Inference steps; defaults to the config's sampler steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        schedule: Option<MaskSchedule>,
        #[arg(long)]
        mapping: Option<MappingFunction>,
        #[arg(long)]
        temperature_scale: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the first sample's per-step images and mask counts.
        #[arg(long)]
        dump_trajectory: bool,
    },
    /// Regenerate the non-black region of a mask PNG inside an image PNG.
    Inpaint {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Treat the mask as the region to keep and generate the rest.
        #[arg(long)]
        outpaint: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a copy of the trained encoder for classification.
    Finetune(RunArgs),
    /// Linear probe on the frozen trained encoder.
    Linprobe(RunArgs),
    /// Compare classifiers trained on pixels and on tokenizer embeddings.
    InputStudy(RunArgs),
    /// Check the diffusion identities on random tiny chains by enumeration.
    VerifyCalculus {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        /// JSON report destination.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run every stage in order, resuming completed ones.
    RunPipeline {
        #[command(flatten)]
        run: RunArgs,
        /// Also train and sample every ablation combination.
        #[arg(long)]
        ablation: bool,
    },
    /// Generate (if needed) and compute desk-FID figures.
    Eval(RunArgs),
}

fn print(v: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::TrainTokenizer(a) => {
            let mut run = a.open()?;
            run.tokenizer()?;
            print(&run.manifest.record("tokenizer").map(|r| r.metrics.clone()).unwrap_or_default())
        }
        Command::TrainPredictor(a) => {
            let mut run = a.open()?;
            run.predictor()?;
            print(&run.manifest.record("predictor").map(|r| r.metrics.clone()).unwrap_or_default())
        }
        Command::TrainAddp(a) => {
            let mut run = a.open()?;
            run.addp()?;
            print(&run.manifest.record("addp").map(|r| r.metrics.clone()).unwrap_or_default())
        }
        Command::Generate { run: a, n, steps, schedule, mapping, temperature_scale, seed, dump_trajectory } => {
            let mut run = a.open()?;
            let mut sampler = run.cfg.sampler.clone();
            sampler.steps = steps.unwrap_or(sampler.steps);
            sampler.schedule = schedule.unwrap_or(sampler.schedule);
            sampler.mapping = mapping.unwrap_or(sampler.mapping);
            sampler.temperature_scale = temperature_scale.unwrap_or(sampler.temperature_scale);
            sampler.validate()?;
            let g = run.sample(&sampler, n, seed, dump_trajectory)?;
            let tag = &run.hash[..12];
            let stem = format!("generate_s{seed}_t{}", sampler.steps);
            let grid = grid_path(&run.dir, &stem, tag);
            save_grid(&grid, &g.images, run.cfg.eval.grid_columns)?;
            let mut out = json!({ "grid": grid, "images": n, "steps_run": g.steps_run });
            if dump_trajectory {
                let frames: Vec<_> = g.trajectory.iter().map(|f| f.x.narrow(0, 1)).collect::<addp::Result<_>>()?;
                let refs: Vec<_> = frames.iter().collect();
                let strip = grid_path(&run.dir, &format!("{stem}_trajectory"), tag);
                save_grid(&strip, &addp::types::ImageBatch::cat(&refs)?, frames.len())?;
                let (h, w) = run.cfg.model.grid();
                let expected: Vec<usize> = (1..=sampler.steps)
                    .rev()
                    .map(|t| unmask_count(t, sampler.steps, sampler.schedule, h * w))
                    .collect::<addp::Result<_>>()?;
                let dump = json!({
                    "t": g.trajectory.iter().map(|f| f.t).collect::<Vec<_>>(),
                    "masked": g.trajectory.iter().map(|f| f.m.masked_count(0)).collect::<Vec<_>>(),
                    "scheduled_masked_after_step": expected,
                    "newly_reliable": g.newly_reliable,
                });
                let path = run.dir.join(format!("{stem}_trajectory_{tag}.json"));
                write_json(&path, &dump)?;
                out["trajectory_strip"] = json!(strip);
                out["trajectory_json"] = json!(path);
            }
            print(&out)
        }
        Command::Inpaint { run: a, image, mask, outpaint, seed, out } => {
            let mut run = a.open()?;
            let res = run.cfg.dataset.resolution;
            let img = load_image(&image, res)?;
            let region = load_mask(&mask, res)?;
            let result = run.inpaint(&img, &region, outpaint, seed)?;
            let stem = if outpaint { "outpaint" } else { "inpaint" };
            let path = out.unwrap_or_else(|| grid_path(&run.dir, &format!("{stem}_s{seed}"), &run.hash[..12]));
            let both = addp::types::ImageBatch::cat(&[&img, &result])?;
            save_grid(&path, &both, 2)?;
            print(&json!({ "output": path, "region_pixels": region.count() }))
        }
        Command::Finetune(a) => {
            let mut run = a.open()?;
            let rep = run.finetune()?;
            let v = serde_json::to_value(&rep)?;
            write_json(&run.dir.join("finetune.json"), &v)?;
            print(&json!({ "accuracy": rep.accuracy, "chance": rep.chance }))
        }
        Command::Linprobe(a) => {
            let mut run = a.open()?;
            let rep = run.linear_probe()?;
            let v = serde_json::to_value(&rep)?;
            write_json(&run.dir.join("linprobe.json"), &v)?;
            print(&json!({ "accuracy": rep.accuracy, "chance": rep.chance }))
        }
        Command::InputStudy(a) => {
            let mut run = a.open()?;
            let study = run.input_study()?;
            print(&json!({
                "pixel_accuracy": study.pixel.accuracy,
                "token_accuracy": study.token.accuracy,
                "chance": study.chance,
                "pixel_at_least_token": study.pixel_at_least_token,
            }))
        }
        Command::VerifyCalculus { seeds, first_seed, report } => {
            let started = std::time::Instant::now();
            let rep = verify_random_specs(first_seed, seeds)?;
            let v = serde_json::to_value(&rep)?;
            schema::validate(schema::CALCULUS_REPORT, &v)?;
            if let Some(path) = report {
                write_json(&path, &v)?;
            }
            let worst = |f: fn(&addp::calculus::SpecOutcome) -> f64| rep.specs.iter().map(f).fold(0.0, f64::max);
            print(&json!({
                "specs": rep.specs.len(),
                "failures": rep.failures,
                "max_bayes_deviation": worst(|s| s.bayes_deviation),
                "max_markov_deviation": worst(|s| s.markov_deviation),
                "min_elbo_gap": rep.specs.iter().map(|s| s.elbo_gap).fold(f64::INFINITY, f64::min),
                "seconds": started.elapsed().as_secs_f64(),
            }))?;
            if !rep.all_passed() {
                bail!("{} of {} specs failed", rep.failures, rep.specs.len());
            }
            Ok(())
        }
        Command::RunPipeline { run: a, ablation } => {
            let (cfg, dir) = a.load()?;
            let summary = run_pipeline(&cfg, &dir)?;
            let mut out = json!({
                "run_dir": summary.dir,
                "config_hash": summary.config_hash,
                "executed": summary.executed,
                "stages": summary.manifest.records.iter().map(|r| (r.stage.clone(), r.metrics.clone())).collect::<serde_json::Map<_, _>>(),
            });
            if ablation {
                let abl = run_ablation(&cfg, &dir)?;
                out["ablation"] = json!({
                    "combinations": abl["combinations"],
                    "mean_loss_by_mapping": abl["mean_loss_by_mapping"],
                });
            }
            print(&out)
        }
        Command::Eval(a) => {
            let mut run = a.open()?;
            let v = run.eval()?;
            print(&v)
        }
    }
}
