//! Iterative generation: alternate between predicting tokens from the current
//! image and rendering the next image from the enlarged reliable set.
//! Inpainting and outpainting start the same loop part-way through.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::AddpModel;
use crate::nn::SeededRng;
use crate::schedules::{mask_ratio, masked_count, unmask_count, MaskSchedule};
use crate::tokenizer::VqTokenizer;
use crate::trainer::{apply_mapping, sample_row, MappingFunction};
use crate::types::{ImageBatch, ReliabilityMask, SoftTokenDist, TokenGrid};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub schedule: MaskSchedule,
    pub temperature_scale: f64,
    pub mapping: MappingFunction,
    /// Score with `ln p + tau * g` instead of `p + tau * g`.
    pub log_space_scores: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 16,
            schedule: MaskSchedule::Cosine,
            temperature_scale: 6.0,
            mapping: MappingFunction::WeightedSum,
            log_space_scores: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn temperature(&self, t: usize) -> f64 {
        self.temperature_scale * t as f64 / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps > 0, Config, "sampler steps must be positive");
        ensure!(self.temperature_scale >= 0.0, Config, "temperature_scale must be non-negative");
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SamplerState {
    pub t: usize,
    pub z: TokenGrid,
    pub m: ReliabilityMask,
    pub soft: SoftTokenDist,
    pub x: ImageBatch,
}

/// Largest f64 strictly below 1; the ceiling for scores of masked positions.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

fn gumbel(r: &mut SeededRng) -> f64 {
    let u: f64 = r.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Picks which positions stay masked after a step.
///
/// Positions already reliable score exactly 1.0. Masked positions score
/// `p + tau * g` clamped below 1.0; the unclamped value and then a seeded
/// shuffle order break ties. The `keep_masked` lowest-ranked positions stay
/// masked, the rest become reliable with their sampled ids.
fn select(
    z: &TokenGrid,
    m: &ReliabilityMask,
    dist: &SoftTokenDist,
    keep_masked: &[usize],
    tau: f64,
    log_space: bool,
    r: &mut SeededRng,
) -> Result<(TokenGrid, ReliabilityMask)> {
    let n = z.tokens_per_sample();
    let rows = dist.rows()?;
    let mut ids = z.ids().to_vec();
    let mut bits = m.bits().to_vec();
    for b in 0..z.batch() {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(r);
        let mut scored: Vec<(f64, f64, usize, usize)> = Vec::with_capacity(n);
        let mut sampled = vec![0u32; n];
        for (rank, &pos) in order.iter().enumerate() {
            let i = b * n + pos;
            if bits[i] == 0 {
                scored.push((1.0, f64::INFINITY, rank, pos));
                continue;
            }
            let id = sample_row(&rows[i], r);
            sampled[pos] = id;
            let p = rows[i][id as usize] as f64;
            let base = if log_space { p.max(f64::MIN_POSITIVE).ln() } else { p };
            let raw = base + tau * gumbel(r);
            scored.push((raw.min(BELOW_ONE), raw, rank, pos));
        }
        // Highest score first; ties fall back to the raw score, then shuffle rank.
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
        let reliable = n - keep_masked[b];
        for (k, &(_, _, _, pos)) in scored.iter().enumerate() {
            let i = b * n + pos;
            if k < reliable {
                if bits[i] == 1 {
                    ids[i] = sampled[pos];
                    bits[i] = 0;
                }
            } else {
                debug_assert_eq!(bits[i], 1, "a reliable position was re-masked");
            }
        }
    }
    let (h, w) = z.grid();
    Ok((TokenGrid::new(ids, z.batch(), h, w)?, ReliabilityMask::new(bits, z.batch(), h, w)?))
}

/// One denoising step from `state.t` to `state.t - 1`.
pub fn step(
    state: &SamplerState,
    model: &AddpModel,
    tokenizer: &VqTokenizer,
    cfg: &SamplerConfig,
    r: &mut SeededRng,
) -> Result<SamplerState> {
    ensure!(state.t >= 1, Validation, "cannot step from t = 0");
    ensure!(state.t <= cfg.steps, Validation, "t = {} exceeds sampler steps {}", state.t, cfg.steps);
    let n = state.z.tokens_per_sample();
    let dist = model.predict(&state.x, &state.z, &state.m)?;
    let target = unmask_count(state.t, cfg.steps, cfg.schedule, n)?;
    let keep: Vec<usize> = (0..state.z.batch()).map(|b| target.min(state.m.masked_count(b))).collect();
    let (z, m) = select(&state.z, &state.m, &dist, &keep, cfg.temperature(state.t), cfg.log_space_scores, r)?;
    let soft = apply_mapping(cfg.mapping, &dist, r)?;
    let x = tokenizer.decode_mixed(&z, &soft, &m)?;
    Ok(SamplerState { t: state.t - 1, z, m, soft, x })
}

#[derive(Debug, Clone)]
pub struct TrajectoryFrame {
    pub t: usize,
    pub x: ImageBatch,
    pub z: TokenGrid,
    pub m: ReliabilityMask,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub images: ImageBatch,
    pub tokens: TokenGrid,
    pub steps_run: usize,
    /// Positions that became reliable at each step, summed over the batch.
    pub newly_reliable: Vec<usize>,
    pub trajectory: Vec<TrajectoryFrame>,
}

fn run_loop(
    mut state: SamplerState,
    model: &AddpModel,
    tokenizer: &VqTokenizer,
    cfg: &SamplerConfig,
    r: &mut SeededRng,
    keep_trajectory: bool,
) -> Result<Generation> {
    let mut trajectory = Vec::new();
    let mut newly_reliable = Vec::new();
    let mut steps_run = 0;
    if keep_trajectory {
        trajectory.push(TrajectoryFrame { t: state.t, x: state.x.clone(), z: state.z.clone(), m: state.m.clone() });
    }
    while state.t > 0 {
        let before = state.m.total_masked();
        state = step(&state, model, tokenizer, cfg, r)?;
        newly_reliable.push(before - state.m.total_masked());
        steps_run += 1;
        if keep_trajectory {
            trajectory.push(TrajectoryFrame { t: state.t, x: state.x.clone(), z: state.z.clone(), m: state.m.clone() });
        }
    }
    Ok(Generation { images: state.x, tokens: state.z, steps_run, newly_reliable, trajectory })
}

/// Generates `batch` images from nothing.
pub fn generate(
    batch: usize,
    model: &AddpModel,
    tokenizer: &VqTokenizer,
    cfg: &SamplerConfig,
    r: &mut SeededRng,
    keep_trajectory: bool,
) -> Result<Generation> {
    cfg.validate()?;
    let (h, w) = model.config().grid();
    let n = h * w;
    let dist = model.predict_from_empty(batch)?;
    let all = ReliabilityMask::all_ones(batch, h, w);
    let blank = TokenGrid::filled(0, batch, h, w);
    let k = masked_count(mask_ratio(cfg.steps, cfg.steps, cfg.schedule)?, n);
    let (z, m) = select(&blank, &all, &dist, &vec![k; batch], cfg.temperature(cfg.steps), cfg.log_space_scores, r)?;
    let soft = apply_mapping(cfg.mapping, &dist, r)?;
    let x = tokenizer.decode_mixed(&z, &soft, &m)?;
    let state = SamplerState { t: cfg.steps, z, m, soft, x };
    run_loop(state, model, tokenizer, cfg, r, keep_trajectory)
}

/// Pixel-resolution region, 1 = to be generated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    bits: Vec<u8>,
    height: usize,
    width: usize,
}

impl PixelMask {
    pub fn new(bits: Vec<u8>, height: usize, width: usize) -> Result<Self> {
        ensure!(
            bits.len() == height * width,
            Shape,
            "pixel mask has {} entries, expected {}",
            bits.len(),
            height * width
        );
        ensure!(bits.iter().all(|&b| b <= 1), Validation, "pixel mask entries must be 0 or 1");
        Ok(Self { bits, height, width })
    }

    /// Axis-aligned box `[y0, y1) x [x0, x1)`.
    pub fn rect(height: usize, width: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Self {
        let mut bits = vec![0u8; height * width];
        for y in y0..y1.min(height) {
            for x in x0..x1.min(width) {
                bits[y * width + x] = 1;
            }
        }
        Self { bits, height, width }
    }

    /// Everything except a centered square of side `keep`.
    pub fn border(height: usize, width: usize, keep: usize) -> Self {
        let y0 = (height.saturating_sub(keep)) / 2;
        let x0 = (width.saturating_sub(keep)) / 2;
        Self::rect(height, width, y0, y0 + keep, x0, x0 + keep).complement()
    }

    pub fn complement(&self) -> Self {
        Self { bits: self.bits.iter().map(|&b| 1 - b).collect(), height: self.height, width: self.width }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Token positions whose `patch x patch` footprint touches the region.
    pub fn token_mask(&self, patch: usize) -> Vec<u8> {
        let (h, w) = (self.height / patch, self.width / patch);
        let mut out = vec![0u8; h * w];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.bits[y * self.width + x] == 1 {
                    out[(y / patch) * w + x / patch] = 1;
                }
            }
        }
        out
    }

    /// Blend weight of generated content: 1 inside the region, falling
    /// linearly to 0 at `band` pixels (Euclidean) outside it.
    pub fn blend_weights(&self, band: f64) -> Vec<f64> {
        let inside: Vec<(usize, usize)> = (0..self.height * self.width)
            .filter(|&i| self.bits[i] == 1)
            .map(|i| (i / self.width, i % self.width))
            .collect();
        (0..self.height * self.width)
            .map(|i| {
                if self.bits[i] == 1 {
                    return 1.0;
                }
                let (y, x) = (i / self.width, i % self.width);
                let d = inside
                    .iter()
                    .map(|&(py, px)| {
                        let dy = py as f64 - y as f64;
                        let dx = px as f64 - x as f64;
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                (1.0 - d / band).max(0.0)
            })
            .collect()
    }
}

/// Closest step whose mask ratio matches `fraction`.
pub fn step_for_ratio(fraction: f64, total: usize, schedule: MaskSchedule) -> Result<usize> {
    let mut best = (f64::INFINITY, 0);
    for t in 0..=total {
        let d = (mask_ratio(t, total, schedule)? - fraction).abs();
        if d < best.0 {
            best = (d, t);
        }
    }
    Ok(best.1)
}

/// Fills `region` of every image in `image` and blends the result back.
pub fn inpaint(
    image: &ImageBatch,
    region: &PixelMask,
    model: &AddpModel,
    tokenizer: &VqTokenizer,
    cfg: &SamplerConfig,
    r: &mut SeededRng,
) -> Result<ImageBatch> {
    cfg.validate()?;
    let (b, ch, ih, iw) = image.dims();
    ensure!(region.dims() == (ih, iw), Shape, "region {:?} does not match image {ih}x{iw}", region.dims());
    if region.count() == 0 {
        return Ok(image.clone());
    }
    let patch = model.config().patch;
    let (h, w) = model.config().grid();
    let n = h * w;
    let hw = ih * iw;
    let src = image.to_vec()?;
    let generated = if region.count() == hw {
        generate(b, model, tokenizer, cfg, r, false)?.images
    } else {
        // Fill with the per-channel mean of visible pixels.
        let mut filled = src.clone();
        for s in 0..b {
            for c in 0..ch {
                let base = (s * ch + c) * hw;
                let (mut sum, mut cnt) = (0f64, 0usize);
                for i in 0..hw {
                    if region.bits[i] == 0 {
                        sum += src[base + i] as f64;
                        cnt += 1;
                    }
                }
                let mean = (sum / cnt as f64) as f32;
                for i in 0..hw {
                    if region.bits[i] == 1 {
                        filled[base + i] = mean;
                    }
                }
            }
        }
        let x_t = ImageBatch::from_vec(filled, (b, ch, ih, iw))?;
        let token_bits = region.token_mask(patch);
        let masked = token_bits.iter().filter(|&&v| v == 1).count();
        let t = step_for_ratio(masked as f64 / n as f64, cfg.steps, cfg.schedule)?.max(1);
        let z = tokenizer.encode(&x_t)?;
        let m = ReliabilityMask::new(token_bits.repeat(b), b, h, w)?;
        let soft = SoftTokenDist::one_hot(&z, tokenizer.codebook_size())?;
        let state = SamplerState { t, z, m, soft, x: x_t };
        run_loop(state, model, tokenizer, cfg, r, false)?.images
    };
    let gen = generated.to_vec()?;
    let weights = region.blend_weights(patch as f64);
    let mut out = src.clone();
    for s in 0..b {
        for c in 0..ch {
            let base = (s * ch + c) * hw;
            for (i, &wt) in weights.iter().enumerate() {
                if wt > 0.0 {
                    let v = wt * gen[base + i] as f64 + (1.0 - wt) * src[base + i] as f64;
                    out[base + i] = v as f32;
                }
            }
        }
    }
    ImageBatch::from_vec(out, (b, ch, ih, iw))
}

/// Generates everything outside `keep`, holding `keep` fixed.
pub fn outpaint(
    image: &ImageBatch,
    keep: &PixelMask,
    model: &AddpModel,
    tokenizer: &VqTokenizer,
    cfg: &SamplerConfig,
    r: &mut SeededRng,
) -> Result<ImageBatch> {
    inpaint(image, &keep.complement(), model, tokenizer, cfg, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::rng;
    use crate::tokenizer::TokenizerConfig;

    fn nets() -> (AddpModel, VqTokenizer) {
        let m = AddpModel::new(
            &ModelConfig { d_model: 32, encoder_depth: 1, decoder_depth: 1, codebook_size: 16, ..Default::default() },
            0,
        )
        .unwrap();
        let t = VqTokenizer::new(&TokenizerConfig { codebook_size: 16, channels: [8, 16], ..Default::default() }, 1)
            .unwrap();
        (m, t)
    }

    #[test]
    fn temperature_reference() {
        let cfg = SamplerConfig { steps: 64, ..Default::default() };
        assert_eq!(cfg.temperature(32), 3.0);
    }

    #[test]
    fn generation_invariants() {
        let (m, t) = nets();
        for schedule in [MaskSchedule::Cosine, MaskSchedule::Linear] {
            let cfg = SamplerConfig { steps: 8, schedule, ..Default::default() };
            let g = generate(2, &m, &t, &cfg, &mut rng(0), true).unwrap();
            assert_eq!(g.steps_run, 8);
            assert_eq!(g.newly_reliable.iter().sum::<usize>(), 2 * 64);
            let last = &g.trajectory.last().unwrap().m;
            assert_eq!(last.total_masked(), 0);
            for pair in g.trajectory.windows(2) {
                assert!(pair[1].m.is_subset_of(&pair[0].m));
            }
            let v = g.images.to_vec().unwrap();
            assert!(v.iter().all(|p| (-1.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn reliable_tokens_never_change() {
        let (m, t) = nets();
        let cfg = SamplerConfig { steps: 6, ..Default::default() };
        let mut r = rng(5);
        let first = generate(1, &m, &t, &cfg, &mut r, false).unwrap();
        let _ = first;
        let dist = m.predict_from_empty(1).unwrap();
        let blank = TokenGrid::filled(0, 1, 8, 8);
        let (z, mask) = select(&blank, &ReliabilityMask::all_ones(1, 8, 8), &dist, &[40], 2.0, false, &mut r).unwrap();
        let x = t.decode_mixed(&z, &dist, &mask).unwrap();
        let state = SamplerState { t: 3, z: z.clone(), m: mask.clone(), soft: dist, x };
        let next = step(&state, &m, &t, &cfg, &mut r).unwrap();
        for i in 0..64 {
            if mask.bits()[i] == 0 {
                assert_eq!(next.z.ids()[i], z.ids()[i]);
                assert_eq!(next.m.bits()[i], 0);
            }
        }
    }

    #[test]
    fn linear_full_length_adds_one_token_per_step() {
        let (m, t) = nets();
        let cfg = SamplerConfig { steps: 64, schedule: MaskSchedule::Linear, ..Default::default() };
        let g = generate(1, &m, &t, &cfg, &mut rng(1), false).unwrap();
        assert_eq!(g.newly_reliable, vec![1; 64]);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let (m, t) = nets();
        let cfg = SamplerConfig { steps: 4, ..Default::default() };
        let a = generate(2, &m, &t, &cfg, &mut rng(9), false).unwrap();
        let b = generate(2, &m, &t, &cfg, &mut rng(9), false).unwrap();
        assert_eq!(a.images.to_vec().unwrap(), b.images.to_vec().unwrap());
    }

    #[test]
    fn zero_step_is_rejected() {
        let (m, t) = nets();
        let z = TokenGrid::filled(0, 1, 8, 8);
        let state = SamplerState {
            t: 0,
            soft: SoftTokenDist::uniform(1, 8, 8, 16).unwrap(),
            x: t.decode_hard(&z).unwrap(),
            m: ReliabilityMask::all_zeros(1, 8, 8),
            z,
        };
        assert!(step(&state, &m, &t, &SamplerConfig::default(), &mut rng(0)).is_err());
    }

    #[test]
    fn inpaint_compositing() {
        let (m, t) = nets();
        let cfg = SamplerConfig { steps: 8, ..Default::default() };
        let img = crate::data::shapes(2, 32, 3).unwrap().all().unwrap();
        let none = PixelMask::new(vec![0; 1024], 32, 32).unwrap();
        let same = inpaint(&img, &none, &m, &t, &cfg, &mut rng(0)).unwrap();
        assert_eq!(same.to_vec().unwrap(), img.to_vec().unwrap());

        let region = PixelMask::rect(32, 32, 8, 20, 10, 22);
        let out = inpaint(&img, &region, &m, &t, &cfg, &mut rng(0)).unwrap().to_vec().unwrap();
        let src = img.to_vec().unwrap();
        let wts = region.blend_weights(4.0);
        for s in 0..2 {
            for c in 0..3 {
                for i in 0..1024 {
                    let k = (s * 3 + c) * 1024 + i;
                    if wts[i] == 0.0 {
                        assert_eq!(out[k], src[k]);
                    }
                }
            }
        }
    }

    #[test]
    fn blend_weights_fall_off_with_distance() {
        let r = PixelMask::rect(16, 16, 4, 8, 4, 8);
        let w = r.blend_weights(4.0);
        assert_eq!(w[5 * 16 + 5], 1.0);
        assert_eq!(w[5 * 16 + 8], 0.75);
        assert_eq!(w[5 * 16 + 9], 0.5);
        assert_eq!(w[5 * 16 + 11], 0.0);
        assert_eq!(r.token_mask(4), {
            let mut v = vec![0u8; 16];
            v[5] = 1;
            v
        });
    }

    #[test]
    fn ratio_to_step() {
        assert_eq!(step_for_ratio(1.0, 16, MaskSchedule::Cosine).unwrap(), 16);
        assert_eq!(step_for_ratio(0.0, 16, MaskSchedule::Cosine).unwrap(), 0);
        assert_eq!(step_for_ratio(0.5, 10, MaskSchedule::Linear).unwrap(), 5);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn blend_weights_follow_distance_to_a_rectangle(y0 in 0usize..16, x0 in 0usize..16, hh in 1usize..8, ww in 1usize..8, band in 1.0f64..6.0) {
                let (y1, x1) = ((y0 + hh).min(16), (x0 + ww).min(16));
                let region = PixelMask::rect(16, 16, y0, y1, x0, x1);
                let weights = region.blend_weights(band);
                for (i, &w) in weights.iter().enumerate() {
                    let (y, x) = (i / 16, i % 16);
                    let dy = y0.saturating_sub(y).max(y.saturating_sub(y1 - 1)) as f64;
                    let dx = x0.saturating_sub(x).max(x.saturating_sub(x1 - 1)) as f64;
                    let expected = (1.0 - dy.hypot(dx) / band).clamp(0.0, 1.0);
                    prop_assert!((0.0..=1.0).contains(&w));
                    prop_assert!((w - expected).abs() < 1e-12, "pixel ({}, {}) weight {} expected {}", y, x, w, expected);
                }
            }

            #[test]
            fn token_mask_covers_exactly_touched_patches(bits in proptest::collection::vec(0u8..2, 256)) {
                let region = PixelMask::new(bits.clone(), 16, 16).unwrap();
                let tokens = region.token_mask(4);
                for ty in 0..4 {
                    for tx in 0..4 {
                        let touched = (0..4).any(|dy| (0..4).any(|dx| bits[(ty * 4 + dy) * 16 + tx * 4 + dx] == 1));
                        prop_assert_eq!(tokens[ty * 4 + tx] == 1, touched);
                    }
                }
                prop_assert_eq!(region.complement().complement(), region.clone());
                prop_assert_eq!(region.count() + region.complement().count(), 256);
            }

            #[test]
            fn step_for_ratio_is_nearest(fraction in 0.0f64..=1.0, total in 1usize..80) {
                let t = step_for_ratio(fraction, total, MaskSchedule::Cosine).unwrap();
                let best = (mask_ratio(t, total, MaskSchedule::Cosine).unwrap() - fraction).abs();
                for other in 0..=total {
                    let d = (mask_ratio(other, total, MaskSchedule::Cosine).unwrap() - fraction).abs();
                    prop_assert!(best <= d);
                }
            }
        }
    }
}
