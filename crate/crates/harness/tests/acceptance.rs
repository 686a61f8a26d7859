//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 6 and 7 read the desk run in `$ADDP_DESK_RUN_DIR` (default
//! `runs/desk` at the workspace root), training it from `configs/desk.toml`
//! first if it is missing or incomplete. A completed run is reused as is.

use std::path::{Path, PathBuf};
use std::time::Instant;

use addp::calculus::{verify_random_specs, TOLERANCE};
use addp::model::{masked_ce_from_logits, masked_ce_loss, AddpModel, ModelConfig};
use addp::nn::rng;
use addp::sampler::{generate, inpaint, PixelMask, SamplerConfig};
use addp::schedules::{mask_ratio, MaskSchedule, ScheduleConfig, TimestepSampler};
use addp::tokenizer::{TokenizerConfig, VqTokenizer};
use addp::types::{ImageBatch, ReliabilityMask, SoftTokenDist, TokenGrid};
use addp_harness::pipeline::{ablation_grid, run_ablation, run_pipeline};
use addp_harness::ExperimentConfig;
use candle_core::{Device, Tensor, Var};
use rand::Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn small_tokenizer(seed: u64) -> VqTokenizer {
    VqTokenizer::new(&TokenizerConfig { channels: [8, 16], ..Default::default() }, seed).expect("tokenizer")
}

fn small_model(seed: u64) -> AddpModel {
    AddpModel::new(&ModelConfig { d_model: 32, encoder_depth: 1, decoder_depth: 1, ..Default::default() }, seed)
        .expect("model")
}

fn random_grid(r: &mut addp::nn::SeededRng, b: usize, c: u32) -> TokenGrid {
    TokenGrid::new((0..b * 64).map(|_| r.random_range(0..c)).collect(), b, 8, 8).unwrap()
}

fn random_mask(r: &mut addp::nn::SeededRng, b: usize, p: f64) -> ReliabilityMask {
    ReliabilityMask::new((0..b * 64).map(|_| u8::from(r.random_bool(p))).collect(), b, 8, 8).unwrap()
}

fn random_dist(r: &mut addp::nn::SeededRng, b: usize, c: usize, scale: f32) -> Tensor {
    let v: Vec<f32> = (0..b * 64 * c).map(|_| r.random_range(-scale..scale)).collect();
    Tensor::from_vec(v, (b, 8, 8, c), &Device::Cpu).unwrap()
}

/// 1. Enumerated diffusion identities on 100 random tiny chains.
fn calculus() -> Outcome {
    let started = Instant::now();
    let rep = verify_random_specs(0, 100).map_err(fail)?;
    let secs = started.elapsed().as_secs_f64();
    let bayes = rep.specs.iter().map(|s| s.bayes_deviation).fold(0.0, f64::max);
    let markov = rep.specs.iter().map(|s| s.markov_deviation).fold(0.0, f64::max);
    let lt = rep.specs.iter().map(|s| s.lt_identity_deviation).fold(0.0, f64::max);
    let gap = rep.specs.iter().map(|s| s.elbo_gap).fold(f64::INFINITY, f64::min);
    let ok = rep.specs.len() == 100
        && rep.all_passed()
        && bayes < 1e-10
        && markov < 1e-10
        && lt < 1e-10
        && gap >= -1e-10
        && secs < 60.0
        && TOLERANCE <= 1e-10;
    check(
        ok,
        format!(
            "{} specs, bayes {bayes:.1e}, markov {markov:.1e}, step identity {lt:.1e}, min ELBO gap {gap:.1e}, {secs:.1}s",
            rep.specs.len()
        ),
    )
}

/// 2. Finite-difference gradient of the masked loss at unmasked positions.
fn masked_loss_locality() -> Outcome {
    let c = 16;
    let h = 1e-3f32;
    let mut worst_unmasked = 0f64;
    let mut min_masked = f64::INFINITY;
    let mut worst_autograd = 0f64;
    for case in 0..50u64 {
        let mut r = rng(1000 + case);
        let logits = random_dist(&mut r, 2, c, 3.0);
        let target = SoftTokenDist::from_logits(&random_dist(&mut r, 2, c, 3.0)).unwrap();
        let mut mask = random_mask(&mut r, 2, 0.5);
        mask.bits_mut()[0] = 1;
        mask.bits_mut()[1] = 0;
        let base = masked_ce_loss(&SoftTokenDist::from_logits(&logits).unwrap(), &target, &mask).map_err(fail)?;
        let flat = logits.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (pos, &bit) in mask.bits().iter().enumerate() {
            let k = r.random_range(0..c);
            let mut bumped = flat.clone();
            bumped[pos * c + k] += h;
            let t = Tensor::from_vec(bumped, (2, 8, 8, c), &Device::Cpu).unwrap();
            let loss = masked_ce_loss(&SoftTokenDist::from_logits(&t).unwrap(), &target, &mask).map_err(fail)?;
            let g = ((loss - base) / h as f64).abs();
            if bit == 0 {
                worst_unmasked = worst_unmasked.max(g);
            } else {
                min_masked = min_masked.min(g);
            }
        }
        // The training loss path, through autograd.
        let var = Var::from_tensor(&logits.reshape((2 * 64, c)).unwrap()).unwrap();
        let loss = masked_ce_from_logits(var.as_tensor(), &target.tensor().reshape((2 * 64, c)).unwrap(), mask.bits())
            .map_err(fail)?;
        let grad = loss.backward().unwrap().get(var.as_tensor()).unwrap().to_vec2::<f32>().unwrap();
        for (pos, &bit) in mask.bits().iter().enumerate() {
            if bit == 0 {
                worst_autograd = worst_autograd.max(grad[pos].iter().map(|g| g.abs() as f64).fold(0.0, f64::max));
            }
        }
    }
    check(
        worst_unmasked < 1e-8 && worst_autograd < 1e-8 && min_masked > 0.0,
        format!(
            "50 cases, max |fd grad| unmasked {worst_unmasked:.1e}, autograd {worst_autograd:.1e}, smallest masked {min_masked:.1e}"
        ),
    )
}

/// 3. Mixed decoding reduces to hard decoding on one-hot input and ignores
///    the soft input when nothing is masked.
fn mixed_decoding_reductions() -> Outcome {
    let mut exact = 0;
    let mut ignored = 0;
    for case in 0..100u64 {
        let tok = small_tokenizer(case % 5);
        let mut r = rng(2000 + case);
        let z = random_grid(&mut r, 1, 64);
        let ratio = r.random_range(0.0..1.0);
        let mask = random_mask(&mut r, 1, ratio);
        let hard = tok.decode_hard(&z).map_err(fail)?.to_vec().map_err(fail)?;
        let one_hot = SoftTokenDist::one_hot(&z, 64).map_err(fail)?;
        let mixed = tok.decode_mixed(&z, &one_hot, &mask).map_err(fail)?.to_vec().map_err(fail)?;
        if hard.iter().zip(&mixed).all(|(a, b)| a.to_bits() == b.to_bits()) {
            exact += 1;
        }
        let none = ReliabilityMask::all_zeros(1, 8, 8);
        let soft_a = SoftTokenDist::from_logits(&random_dist(&mut r, 1, 64, 4.0)).map_err(fail)?;
        let soft_b = SoftTokenDist::uniform(1, 8, 8, 64).map_err(fail)?;
        let a = tok.decode_mixed(&z, &soft_a, &none).map_err(fail)?.to_vec().map_err(fail)?;
        let b = tok.decode_mixed(&z, &soft_b, &none).map_err(fail)?.to_vec().map_err(fail)?;
        if a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) && a == hard {
            ignored += 1;
        }
    }
    check(exact == 100 && ignored == 100, format!("one-hot bit-exact {exact}/100, unmasked ignores soft {ignored}/100"))
}

/// Masked count after the step at `t`, from the cosine schedule written
/// directly: `round_half_up(n * cos(pi/2 * (1 - (t-1)/T)))`.
fn cosine_masked_after(t: usize, total: usize, n: usize) -> usize {
    if t == 0 {
        return 0;
    }
    let s = (t - 1) as f64 / total as f64;
    let ratio = (std::f64::consts::FRAC_PI_2 * (1.0 - s)).cos();
    ((ratio * n as f64 + 0.5).floor() as usize).min(n)
}

/// 4. Sampler trajectories.
fn sampler_invariants() -> Outcome {
    let tok = small_tokenizer(0);
    let model = small_model(0);
    let mut runs = 0;
    let mut problems = Vec::new();
    for &steps in &[16usize, 64] {
        let cfg = SamplerConfig { steps, ..Default::default() };
        for seed in 0..10u64 {
            let g = generate(1, &model, &tok, &cfg, &mut rng(seed), true).map_err(fail)?;
            runs += 1;
            let frames = &g.trajectory;
            if frames.len() != steps + 1 || frames[0].m.total_masked() != 64 {
                problems.push(format!("T={steps} seed {seed}: bad start"));
            }
            for pair in frames.windows(2) {
                let (prev, next) = (&pair[0], &pair[1]);
                if !next.m.is_subset_of(&prev.m) {
                    problems.push(format!("T={steps} seed {seed}: mask grew at t={}", prev.t));
                }
                for i in 0..64 {
                    if prev.m.bits()[i] == 0 && next.z.ids()[i] != prev.z.ids()[i] {
                        problems.push(format!("T={steps} seed {seed}: reliable token changed at t={}", prev.t));
                    }
                }
                if next.m.total_masked() != cosine_masked_after(prev.t, steps, 64) {
                    problems.push(format!(
                        "T={steps} seed {seed}: {} masked after t={}, schedule says {}",
                        next.m.total_masked(),
                        prev.t,
                        cosine_masked_after(prev.t, steps, 64)
                    ));
                }
            }
            if g.trajectory.last().map(|f| f.m.total_masked()) != Some(0) {
                problems.push(format!("T={steps} seed {seed}: mask not empty at the end"));
            }
            let again = generate(1, &model, &tok, &cfg, &mut rng(seed), false).map_err(fail)?;
            let same_pixels = g
                .images
                .to_vec()
                .unwrap()
                .iter()
                .zip(again.images.to_vec().unwrap())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same_pixels || g.tokens != again.tokens {
                problems.push(format!("T={steps} seed {seed}: rerun differs"));
            }
        }
    }
    check(
        problems.is_empty() && runs == 20,
        if problems.is_empty() {
            format!("{runs} trajectories: monotone masks, frozen reliable tokens, exact counts, reproducible")
        } else {
            problems[..problems.len().min(3)].join("; ")
        },
    )
}

/// 5. Schedule boundary values, monotonicity and timestep sampling.
fn schedule_math() -> Outcome {
    for &total in &[10usize, 100, 256] {
        for schedule in [MaskSchedule::Cosine, MaskSchedule::Linear] {
            let ratios: Vec<f64> = (0..=total).map(|t| mask_ratio(t, total, schedule).unwrap()).collect();
            if ratios[0] != 0.0 || ratios[total] != 1.0 {
                return Err(format!("{schedule:?} T={total}: boundary values {} and {}", ratios[0], ratios[total]));
            }
            if ratios.windows(2).any(|w| w[1] < w[0]) {
                return Err(format!("{schedule:?} T={total}: not monotone"));
            }
        }
    }
    let cfg = ScheduleConfig::default();
    // Analytic distribution, computed here from the truncated normal.
    let weights: Vec<f64> = (1..=cfg.steps)
        .map(|t| {
            let ratio = (std::f64::consts::FRAC_PI_2 * (1.0 - t as f64 / cfg.steps as f64)).cos();
            if (0.5..=1.0).contains(&ratio) {
                let z = (ratio - cfg.truncnorm_mean) / cfg.truncnorm_std;
                (-0.5 * z * z).exp()
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let analytic: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let sampler = TimestepSampler::new(&cfg).map_err(fail)?;
    let mut r = rng(5);
    let draws = 100_000;
    let mut hist = vec![0f64; cfg.steps];
    let mut outside = 0;
    for _ in 0..draws {
        let d = sampler.sample(&mut r);
        hist[d.t - 1] += 1.0;
        let ratio = mask_ratio(d.t, cfg.steps, cfg.schedule).unwrap();
        if !(0.5..=1.0).contains(&ratio) {
            outside += 1;
        }
    }
    let tv: f64 = 0.5 * hist.iter().zip(&analytic).map(|(h, p)| (h / draws as f64 - p).abs()).sum::<f64>();
    let analytic_outside: f64 = (1..=cfg.steps)
        .filter(|&t| !(0.5..=1.0).contains(&mask_ratio(t, cfg.steps, cfg.schedule).unwrap()))
        .map(|t| sampler.probabilities()[t - 1])
        .sum();
    check(
        tv < 0.02 && outside == 0 && analytic_outside == 0.0,
        format!("boundaries and monotonicity hold, TV {tv:.4} over {draws} draws, {outside} draws outside [0.5, 1]"),
    )
}

fn desk_dir() -> PathBuf {
    std::env::var_os("ADDP_DESK_RUN_DIR").map(PathBuf::from).unwrap_or_else(|| workspace_root().join("runs/desk"))
}

fn desk_manifest() -> Result<addp_harness::manifest::MetricsManifest, String> {
    let cfg = ExperimentConfig::load(&workspace_root().join("configs/desk.toml")).map_err(fail)?;
    let summary = run_pipeline(&cfg, &desk_dir()).map_err(fail)?;
    Ok(summary.manifest)
}

fn metric(m: &addp_harness::manifest::MetricsManifest, stage: &str, key: &str) -> Result<f64, String> {
    m.record(stage)
        .and_then(|r| r.metrics.get(key))
        .and_then(Value::as_f64)
        .ok_or_else(|| format!("manifest lacks {stage}.{key}"))
}

/// 6. Toy training targets on the desk run.
fn training_targets(m: &addp_harness::manifest::MetricsManifest) -> Outcome {
    let psnr = metric(m, "tokenizer", "psnr")?;
    let top1 = metric(m, "predictor", "masked_top1")?;
    let loss = metric(m, "addp", "held_out_masked_loss")?;
    let fid_gen = metric(m, "eval", "desk_fid_generated")?;
    let fid_noise = metric(m, "eval", "desk_fid_noise")?;
    let limit = 0.7 * 64f64.ln();
    let chance = 1.0 / 64.0;
    let ok = psnr >= 20.0 && top1 >= 5.0 * chance && loss <= limit && fid_noise >= 2.0 * fid_gen;
    check(
        ok,
        format!(
            "PSNR {psnr:.2} dB (>= 20), predictor top-1 {top1:.3} (>= {:.3}), ADDP loss {loss:.3} (<= {limit:.3}), \
             desk-FID generated {fid_gen:.2} vs noise {fid_noise:.2} (ratio {:.2} >= 2)",
            5.0 * chance,
            fid_noise / fid_gen
        ),
    )
}

/// 7. Recognition on the desk checkpoint.
fn recognition(m: &addp_harness::manifest::MetricsManifest) -> Outcome {
    let chance = metric(m, "recognition", "chance")?;
    let probe = metric(m, "recognition", "linear_probe_accuracy")?;
    let ft = metric(m, "recognition", "finetune_accuracy")?;
    let scratch = metric(m, "recognition", "scratch_accuracy")?;
    check(
        probe >= 3.0 * chance && ft >= probe,
        format!("linear probe {probe:.3} (>= {:.3}), fine-tune {ft:.3} (>= probe), scratch {scratch:.3}", 3.0 * chance),
    )
}

/// 8. Every ablation combination trains, samples and writes a manifest.
fn ablation_plumbing() -> Outcome {
    let cfg = ExperimentConfig::load(&workspace_root().join("configs/ablation.toml")).map_err(fail)?;
    let dir = tempfile::tempdir().map_err(fail)?;
    let summary = run_ablation(&cfg, dir.path()).map_err(fail)?;
    let expected = ablation_grid().len();
    let mut with_manifest = 0;
    for combo in ablation_grid() {
        let sub = dir.path().join("ablation").join(combo.name());
        let m = addp_harness::manifest::MetricsManifest::load(&sub).map_err(fail)?;
        if m.is_some_and(|m| m.record("addp").is_some() && m.record("generate").is_some()) {
            with_manifest += 1;
        }
    }
    let by_mapping = summary["mean_loss_by_mapping"].to_string();
    check(
        expected == 54 && with_manifest == expected && summary["combinations"] == expected,
        format!("{with_manifest}/{expected} combinations with manifests; mean held-out loss by mapping {by_mapping}"),
    )
}

/// 9. Inpainting leaves pixels outside the blend band untouched.
fn inpainting() -> Outcome {
    let tok = small_tokenizer(1);
    let model = small_model(1);
    let cfg = SamplerConfig { steps: 8, ..Default::default() };
    let mut r = rng(9);
    let mut checked = 0usize;
    for case in 0..6u64 {
        let pixels: Vec<f32> = (0..2 * 3 * 32 * 32).map(|_| r.random_range(-1.0..1.0)).collect();
        let image = ImageBatch::from_vec(pixels, (2, 3, 32, 32)).map_err(fail)?;
        let y0 = r.random_range(0..20);
        let x0 = r.random_range(0..20);
        let region = PixelMask::rect(32, 32, y0, y0 + r.random_range(1..12), x0, x0 + r.random_range(1..12));
        let out = inpaint(&image, &region, &model, &tok, &cfg, &mut rng(case)).map_err(fail)?;
        let weights = region.blend_weights(4.0);
        let (src, dst) = (image.to_vec().unwrap(), out.to_vec().unwrap());
        for s in 0..2 * 3 {
            for (i, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    if src[s * 1024 + i].to_bits() != dst[s * 1024 + i].to_bits() {
                        return Err(format!("case {case}: pixel {i} outside the band changed"));
                    }
                    checked += 1;
                }
            }
        }
        let empty = PixelMask::new(vec![0; 1024], 32, 32).map_err(fail)?;
        let same = inpaint(&image, &empty, &model, &tok, &cfg, &mut rng(case)).map_err(fail)?;
        if same.to_vec().unwrap() != src {
            return Err(format!("case {case}: empty region changed the image"));
        }
    }
    check(
        checked > 0,
        format!("{checked} pixels outside blend bands bit-identical over 6 regions; empty region is identity"),
    )
}

fn main() {
    // `cargo test` passes filter arguments through; honour a name filter.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wants = |name: &str| filter.as_deref().is_none_or(|f| name.contains(f));
    let _ = env_logger_init();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        if wants(name) {
            let started = Instant::now();
            let out = f();
            let secs = started.elapsed().as_secs_f64();
            let line = match &out {
                Ok(d) => format!("[PASS] {id} {name}: {d} ({secs:.1}s)"),
                Err(d) => format!("[FAIL] {id} {name}: {d} ({secs:.1}s)"),
            };
            println!("{line}");
            results.push((id, name, out));
        }
    };
    run(1, "calculus_suite", &calculus);
    run(2, "masked_loss_locality", &masked_loss_locality);
    run(3, "mixed_decoding_reductions", &mixed_decoding_reductions);
    run(4, "sampler_invariants", &sampler_invariants);
    run(5, "schedule_math", &schedule_math);
    if wants("training_targets") || wants("recognition") {
        match desk_manifest() {
            Ok(m) => {
                run(6, "training_targets", &|| training_targets(&m));
                run(7, "recognition", &|| recognition(&m));
            }
            Err(e) => {
                run(6, "training_targets", &|| Err(format!("desk run failed: {e}")));
                run(7, "recognition", &|| Err(format!("desk run failed: {e}")));
            }
        }
    }
    run(8, "ablation_plumbing", &ablation_plumbing);
    run(9, "inpainting", &inpainting);
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn env_logger_init() -> Result<(), log::SetLoggerError> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init()
}
