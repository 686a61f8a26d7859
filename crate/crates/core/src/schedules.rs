//! Time and mask bookkeeping.
//!
//! Time runs in diffusion order: `t = 0` is the clean token grid and
//! `t = T` is fully masked. The cosine curve is `cos(pi/2 * (T - t) / T)`,
//! evaluated as `sin(pi/2 * t / T)` so both endpoints are exact. The
//! training-time form `cos(pi/2 * t / T)` is the same curve with the index
//! reversed.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::types::ReliabilityMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSchedule {
    Cosine,
    Linear,
}

impl std::str::FromStr for MaskSchedule {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(MaskSchedule::Cosine),
            "linear" => Ok(MaskSchedule::Linear),
            other => Err(crate::Error::Validation(format!("unknown schedule `{other}` (expected cosine or linear)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Total diffusion steps `T`.
    pub steps: usize,
    pub schedule: MaskSchedule,
    pub truncnorm_mean: f64,
    pub truncnorm_std: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// `delta_t` is drawn uniformly from `1..=delta_t_max`.
    pub delta_t_max: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            schedule: MaskSchedule::Cosine,
            truncnorm_mean: 0.55,
            truncnorm_std: 0.25,
            ratio_min: 0.5,
            ratio_max: 1.0,
            delta_t_max: 5,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Validation, "schedule steps must be >= 1");
        ensure!(self.delta_t_max >= 1, Validation, "delta_t_max must be >= 1");
        ensure!(self.truncnorm_std > 0.0, Validation, "truncnorm_std must be positive");
        ensure!(
            0.0 <= self.ratio_min && self.ratio_min <= self.ratio_max && self.ratio_max <= 1.0,
            Validation,
            "ratio support [{}, {}] must lie inside [0, 1]",
            self.ratio_min,
            self.ratio_max
        );
        Ok(())
    }
}

/// Fraction of masked positions at diffusion time `t` of `total`.
pub fn mask_ratio(t: usize, total: usize, schedule: MaskSchedule) -> Result<f64> {
    ensure!(total >= 1, Validation, "total steps must be >= 1");
    ensure!(t <= total, Validation, "t = {t} outside [0, {total}]");
    let s = t as f64 / total as f64;
    Ok(match schedule {
        MaskSchedule::Linear => s,
        MaskSchedule::Cosine => {
            if t == total {
                1.0
            } else {
                (std::f64::consts::FRAC_PI_2 * s).sin()
            }
        }
    })
}

/// Ratio for step `s` where any `s > total` is the all-masked state.
pub fn mask_ratio_clamped(s: usize, total: usize, schedule: MaskSchedule) -> Result<f64> {
    if s > total {
        Ok(1.0)
    } else {
        mask_ratio(s, total, schedule)
    }
}

/// `round_half_up(ratio * n)`, clamped to `[0, n]`.
pub fn masked_count(ratio: f64, n_tokens: usize) -> usize {
    let k = (ratio * n_tokens as f64 + 0.5).floor();
    if k <= 0.0 {
        0
    } else {
        (k as usize).min(n_tokens)
    }
}

/// Tokens left masked after the inference step at time `t` (i.e. `|m_{t-1}|`).
pub fn unmask_count(t: usize, total: usize, schedule: MaskSchedule, n_tokens: usize) -> Result<usize> {
    ensure!(t <= total, Validation, "t = {t} outside [0, {total}]");
    if t == 0 {
        return Ok(0);
    }
    Ok(masked_count(mask_ratio(t - 1, total, schedule)?, n_tokens))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Normalized probabilities of `t = 1..=T` (index `t - 1`): truncated-normal
/// density at each step's mask ratio, zero outside `[ratio_min, ratio_max]`.
pub fn timestep_distribution(cfg: &ScheduleConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut w = Vec::with_capacity(cfg.steps);
    for t in 1..=cfg.steps {
        let r = mask_ratio(t, cfg.steps, cfg.schedule)?;
        let inside = r >= cfg.ratio_min && r <= cfg.ratio_max;
        w.push(if inside { std_normal_pdf((r - cfg.truncnorm_mean) / cfg.truncnorm_std) } else { 0.0 });
    }
    let total: f64 = w.iter().sum();
    ensure!(total > 0.0, Validation, "no timestep has a mask ratio inside [{}, {}]", cfg.ratio_min, cfg.ratio_max);
    Ok(w.into_iter().map(|x| x / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimestepDraw {
    pub t: usize,
    pub delta_t: usize,
}

impl TimestepDraw {
    /// Step of the more-masked state, capped at the all-masked step `T + 1`.
    pub fn shifted(&self, total: usize) -> usize {
        (self.t + self.delta_t).min(total + 1)
    }
}

/// Draws `(t, delta_t)` from a precomputed timestep distribution.
pub struct TimestepSampler {
    cfg: ScheduleConfig,
    probs: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl TimestepSampler {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let probs = timestep_distribution(cfg)?;
        let index =
            WeightedIndex::new(&probs).map_err(|e| crate::Error::Validation(format!("timestep weights: {e}")))?;
        Ok(Self { cfg: cfg.clone(), probs, index })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TimestepDraw {
        let t = self.index.sample(rng) + 1;
        let delta_t = rng.random_range(1..=self.cfg.delta_t_max);
        TimestepDraw { t, delta_t }
    }
}

pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, cfg: &ScheduleConfig) -> Result<TimestepDraw> {
    Ok(TimestepSampler::new(cfg)?.sample(rng))
}

/// Nested masks `m_lo <= m_hi` with exactly `round(ratio * h * w)` ones per
/// sample; positions are uniform without replacement.
pub fn make_nested_masks<R: Rng + ?Sized>(
    rng: &mut R,
    ratio_lo: f64,
    ratio_hi: f64,
    grid: (usize, usize),
    batch: usize,
) -> Result<(ReliabilityMask, ReliabilityMask)> {
    ensure!(
        (0.0..=1.0).contains(&ratio_lo) && (0.0..=1.0).contains(&ratio_hi),
        Validation,
        "mask ratios must lie in [0, 1]"
    );
    ensure!(ratio_lo <= ratio_hi, Validation, "ratio_lo {ratio_lo} exceeds ratio_hi {ratio_hi}");
    let n = grid.0 * grid.1;
    let k_lo = masked_count(ratio_lo, n);
    let k_hi = masked_count(ratio_hi, n).max(k_lo);
    let mut lo = vec![0u8; batch * n];
    let mut hi = vec![0u8; batch * n];
    let mut order: Vec<usize> = (0..n).collect();
    for b in 0..batch {
        order.shuffle(rng);
        for (rank, &pos) in order.iter().enumerate() {
            if rank < k_lo {
                lo[b * n + pos] = 1;
            }
            if rank < k_hi {
                hi[b * n + pos] = 1;
            }
        }
    }
    Ok((ReliabilityMask::new(lo, batch, grid.0, grid.1)?, ReliabilityMask::new(hi, batch, grid.0, grid.1)?))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TimestepDistributionDump {
    pub steps: usize,
    pub schedule: MaskSchedule,
    pub mask_ratio: Vec<f64>,
    pub probability: Vec<f64>,
}

/// Analytic timestep distribution in a plot-friendly form.
pub fn dump_timestep_distribution(cfg: &ScheduleConfig) -> Result<TimestepDistributionDump> {
    let probability = timestep_distribution(cfg)?;
    let mask_ratio = (1..=cfg.steps).map(|t| mask_ratio(t, cfg.steps, cfg.schedule)).collect::<Result<Vec<_>>>()?;
    Ok(TimestepDistributionDump { steps: cfg.steps, schedule: cfg.schedule, mask_ratio, probability })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn boundary_values() {
        for s in [MaskSchedule::Cosine, MaskSchedule::Linear] {
            assert_eq!(mask_ratio(0, 17, s).unwrap(), 0.0);
            assert_eq!(mask_ratio(17, 17, s).unwrap(), 1.0);
        }
        assert_eq!(mask_ratio(64, 256, MaskSchedule::Linear).unwrap(), 0.25);
        assert!(mask_ratio(18, 17, MaskSchedule::Linear).is_err());
    }

    #[test]
    fn cosine_matches_reversed_cos_form() {
        let total = 100;
        for t in 0..=total {
            let direct = (std::f64::consts::FRAC_PI_2 * (total - t) as f64 / total as f64).cos();
            let ours = mask_ratio(t, total, MaskSchedule::Cosine).unwrap();
            assert!((direct - ours).abs() < 1e-15, "t={t}");
        }
    }

    #[test]
    fn monotone_for_reference_lengths() {
        for total in [10, 100, 256] {
            for s in [MaskSchedule::Cosine, MaskSchedule::Linear] {
                let r: Vec<f64> = (0..=total).map(|t| mask_ratio(t, total, s).unwrap()).collect();
                assert!(r.windows(2).all(|w| w[0] <= w[1]), "{s:?} T={total}");
            }
        }
    }

    #[test]
    fn zero_probability_below_half() {
        let cfg = ScheduleConfig::default();
        let p = timestep_distribution(&cfg).unwrap();
        for t in 1..=cfg.steps {
            let r = mask_ratio(t, cfg.steps, cfg.schedule).unwrap();
            if r < 0.5 {
                assert_eq!(p[t - 1], 0.0);
            }
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mode_is_closest_to_mean() {
        let cfg = ScheduleConfig::default();
        let p = timestep_distribution(&cfg).unwrap();
        let argmax = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap() + 1;
        let closest = (1..=cfg.steps)
            .min_by(|&a, &b| {
                let da = (mask_ratio(a, cfg.steps, cfg.schedule).unwrap() - 0.55).abs();
                let db = (mask_ratio(b, cfg.steps, cfg.schedule).unwrap() - 0.55).abs();
                da.total_cmp(&db)
            })
            .unwrap();
        assert_eq!(argmax, closest);
    }

    #[test]
    fn delta_t_constant_when_max_is_one() {
        let cfg = ScheduleConfig { delta_t_max: 1, ..Default::default() };
        let s = TimestepSampler::new(&cfg).unwrap();
        let mut r = rng(3);
        for _ in 0..500 {
            assert_eq!(s.sample(&mut r).delta_t, 1);
        }
    }

    #[test]
    fn shifted_step_saturates_at_all_masked() {
        let d = TimestepDraw { t: 98, delta_t: 5 };
        assert_eq!(d.shifted(100), 101);
        assert_eq!(mask_ratio_clamped(101, 100, MaskSchedule::Cosine).unwrap(), 1.0);
    }

    #[test]
    fn nested_mask_edge_cases() {
        let mut r = rng(1);
        let (lo, hi) = make_nested_masks(&mut r, 0.3, 0.3, (8, 8), 4).unwrap();
        assert_eq!(lo, hi);
        let (_, hi) = make_nested_masks(&mut r, 0.2, 1.0, (8, 8), 4).unwrap();
        assert!(hi.bits().iter().all(|&b| b == 1));
        assert!(make_nested_masks(&mut r, 0.6, 0.5, (8, 8), 1).is_err());
        let (lo, _) = make_nested_masks(&mut r, 0.5, 0.5, (8, 8), 1).unwrap();
        assert_eq!(lo.masked_count(0), 32);
    }

    #[test]
    fn nested_for_many_draws() {
        let mut r = rng(11);
        for _ in 0..1000 {
            let a: f64 = r.random();
            let b: f64 = r.random();
            let (lo, hi) = make_nested_masks(&mut r, a.min(b), a.max(b), (8, 8), 1).unwrap();
            assert!(lo.is_subset_of(&hi));
        }
    }

    #[test]
    fn linear_full_length_unmasks_one_per_step() {
        let n = 64;
        let mut prev = n;
        for t in (1..=n).rev() {
            let k = unmask_count(t, n, MaskSchedule::Linear, n).unwrap();
            assert_eq!(prev - k, 1, "t={t}");
            prev = k;
        }
        assert_eq!(unmask_count(1, n, MaskSchedule::Cosine, n).unwrap(), 0);
    }

    #[test]
    fn newly_unmasked_counts_telescope() {
        for (total, s) in [(16, MaskSchedule::Cosine), (64, MaskSchedule::Cosine), (10, MaskSchedule::Linear)] {
            let n = 64;
            let mut prev = masked_count(mask_ratio(total, total, s).unwrap(), n);
            let mut sum = 0;
            for t in (1..=total).rev() {
                let k = unmask_count(t, total, s, n).unwrap();
                assert!(k <= prev);
                sum += prev - k;
                prev = k;
            }
            assert_eq!(sum, n);
        }
    }

    proptest! {
        #[test]
        fn nested_masks_have_exact_counts(lo in 0.0f64..=1.0, extra in 0.0f64..=1.0, b in 1usize..4, seed in any::<u64>()) {
            let hi = (lo + extra).min(1.0);
            let mut r = rng(seed);
            let (mlo, mhi) = make_nested_masks(&mut r, lo, hi, (8, 8), b).unwrap();
            prop_assert!(mlo.is_subset_of(&mhi));
            for i in 0..b {
                prop_assert_eq!(mlo.masked_count(i), masked_count(lo, 64));
                prop_assert_eq!(mhi.masked_count(i), masked_count(hi, 64));
            }
        }

        #[test]
        fn sampled_timesteps_stay_in_ratio_support(seed in any::<u64>(), steps in 3usize..300) {
            let cfg = ScheduleConfig { steps, ..Default::default() };
            let s = TimestepSampler::new(&cfg).unwrap();
            let mut r = rng(seed);
            for _ in 0..50 {
                let d = s.sample(&mut r);
                let ratio = mask_ratio(d.t, steps, cfg.schedule).unwrap();
                prop_assert!((0.5..=1.0).contains(&ratio));
                prop_assert!((1..=5).contains(&d.delta_t));
            }
        }
    }
}
