//! Exact checks of the identities behind the training objective, by
//! enumeration over chains small enough to tabulate completely.
//!
//! All arithmetic is f64 with compensated summation; the tolerances are
//! 1e-10 and the tables have at most a few hundred thousand entries.

mod chain;

pub use chain::{TinyChainSpec, MAX_CODES, MAX_POSITIONS, MAX_STEPS};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub const TOLERANCE: f64 = 1e-10;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sum {
    total: f64,
    carry: f64,
}

impl Sum {
    pub fn add(&mut self, v: f64) {
        let t = self.total + v;
        if self.total.abs() >= v.abs() {
            self.carry += (self.total - t) + v;
        } else {
            self.carry += (v - t) + self.total;
        }
        self.total = t;
    }

    pub fn value(&self) -> f64 {
        self.total + self.carry
    }
}

pub fn neumaier(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = Sum::default();
    for v in values {
        s.add(v);
    }
    s.value()
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Conditional path probabilities given the clean grid, found by walking
/// every mask path with non-zero probability.
struct Paths {
    z: usize,
    k: usize,
    /// `pair[t][(x0 * Z + a) * Z + b] = q(z_t = a, z_{t+1} = b | z_0 = x0)` for
    /// `t <= steps`, where `z_{steps+1}` is the all-masked state.
    pair: Vec<Vec<f64>>,
}

impl Paths {
    fn enumerate(spec: &TinyChainSpec) -> Self {
        let (z, k, steps) = (spec.z_states(), spec.k_states(), spec.steps);
        let mut acc = vec![vec![Sum::default(); k * z * z]; steps + 1];
        let mut path = vec![0usize; steps + 2];
        for x0 in 0..k {
            path[0] = spec.clean_state(x0);
            walk(spec, x0, 0, 1.0, &mut path, &mut acc);
        }
        let pair = acc.into_iter().map(|t| t.iter().map(Sum::value).collect()).collect();
        Paths { z, k, pair }
    }

    fn pair(&self, t: usize, x0: usize, a: usize, b: usize) -> f64 {
        self.pair[t][(x0 * self.z + a) * self.z + b]
    }

    /// `q(z_t = a | z_0 = x0)`, marginalizing the successor.
    fn marginal_from_next(&self, t: usize, x0: usize, a: usize) -> f64 {
        neumaier((0..self.z).map(|b| self.pair(t, x0, a, b)))
    }

    /// `q(z_{t+1} = b | z_0 = x0)`, marginalizing the predecessor.
    fn marginal_from_prev(&self, t: usize, x0: usize, b: usize) -> f64 {
        neumaier((0..self.z).map(|a| self.pair(t, x0, a, b)))
    }

    /// `q(z_0 = x0, z_s = a, zbar_s = c)` for `1 <= s <= steps`, as a `[K, Z, K]` table.
    fn with_unreliable(&self, spec: &TinyChainSpec, s: usize) -> Vec<f64> {
        let (z, k) = (self.z, self.k);
        let mut out = vec![0.0; k * z * k];
        for x0 in 0..k {
            for a in 0..z {
                for c in 0..k {
                    out[(x0 * z + a) * k + c] = neumaier(
                        (0..z)
                            .map(|b| spec.data[x0] * self.pair(s, x0, a, b) * spec.predictor[s][(b * k + x0) * k + c]),
                    );
                }
            }
        }
        out
    }
}

fn walk(spec: &TinyChainSpec, x0: usize, t: usize, w: f64, path: &mut [usize], acc: &mut [Vec<Sum>]) {
    let z = spec.z_states();
    if t == spec.steps {
        path[t + 1] = spec.all_masked();
        for (s, table) in acc.iter_mut().enumerate() {
            table[(x0 * z + path[s]) * z + path[s + 1]].add(w);
        }
        return;
    }
    let a = path[t];
    for b in 0..z {
        let p = spec.mask_kernel[t][a * z + b];
        if p > 0.0 {
            path[t + 1] = b;
            walk(spec, x0, t + 1, w * p, path, acc);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesCheck {
    pub max_deviation: f64,
    /// States skipped because `q(z_t | z_0) = 0`.
    pub skipped: usize,
}

/// Compares every mask-kernel entry with the value rebuilt from the
/// posterior and the two marginals.
pub fn verify_bayes(spec: &TinyChainSpec) -> Result<BayesCheck> {
    spec.validate()?;
    let paths = Paths::enumerate(spec);
    let (z, k) = (spec.z_states(), spec.k_states());
    let mut worst = 0f64;
    let mut skipped = 0;
    for t in 0..spec.steps {
        for x0 in 0..k {
            let prev: Vec<f64> = (0..z).map(|a| paths.marginal_from_next(t, x0, a)).collect();
            let next: Vec<f64> = (0..z).map(|b| paths.marginal_from_next(t + 1, x0, b)).collect();
            for b in 0..z {
                let evidence = paths.marginal_from_prev(t, x0, b);
                for a in 0..z {
                    if prev[a] == 0.0 {
                        skipped += 1;
                        continue;
                    }
                    let posterior = if evidence > 0.0 { paths.pair(t, x0, a, b) / evidence } else { 0.0 };
                    let rebuilt = posterior * next[b] / prev[a];
                    worst = worst.max((spec.mask_kernel[t][a * z + b] - rebuilt).abs());
                }
            }
        }
    }
    Ok(BayesCheck { max_deviation: worst, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkovCheck {
    pub max_deviation: f64,
    /// The predictor tables read the clean grid directly.
    pub structural_violation: bool,
}

/// Checks that also conditioning on the unreliable tokens leaves the
/// posterior over the clean grid unchanged.
pub fn verify_markov_reduction(spec: &TinyChainSpec) -> Result<MarkovCheck> {
    spec.validate()?;
    let paths = Paths::enumerate(spec);
    let (z, k) = (spec.z_states(), spec.k_states());
    let mut worst = 0f64;
    for s in 1..=spec.steps {
        let joint = paths.with_unreliable(spec, s);
        let at = |x0: usize, a: usize, c: usize| joint[(x0 * z + a) * k + c];
        for a in 0..z {
            let state_mass = neumaier((0..k).flat_map(|x0| (0..k).map(move |c| (x0, c))).map(|(x0, c)| at(x0, a, c)));
            if state_mass == 0.0 {
                continue;
            }
            for c in 0..k {
                let pair_mass = neumaier((0..k).map(|x0| at(x0, a, c)));
                if pair_mass == 0.0 {
                    continue;
                }
                for x0 in 0..k {
                    let full = at(x0, a, c) / pair_mass;
                    let reduced = neumaier((0..k).map(|c2| at(x0, a, c2))) / state_mass;
                    worst = worst.max((full - reduced).abs());
                }
            }
        }
    }
    Ok(MarkovCheck { max_deviation: worst, structural_violation: !spec.predictor_is_markov() })
}

/// Per-step pieces of the clean-grid reparameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepIdentity {
    /// KL with a point mass on the true clean grid.
    pub point_mass_kl: f64,
    /// KL against the clean-grid posterior given the reliable tokens only.
    pub posterior_kl: f64,
    pub joint_cross_entropy: f64,
    /// Entropy of the clean grid given reliable and unreliable tokens.
    pub clean_entropy: f64,
    /// Entropy of the token predictor.
    pub predictor_entropy: f64,
    /// KL of the predictor against the model's unreliable-token marginal.
    pub marginal_kl: f64,
    pub marginal_cross_entropy: f64,
}

impl StepIdentity {
    /// Largest violation among: point-mass KL = posterior KL + clean entropy;
    /// posterior KL = joint CE - both entropies; marginal KL = marginal CE -
    /// predictor entropy.
    pub fn deviation(&self) -> f64 {
        let a = (self.point_mass_kl - (self.posterior_kl + self.clean_entropy)).abs();
        let b = (self.posterior_kl - (self.joint_cross_entropy - self.clean_entropy - self.predictor_entropy)).abs();
        let c = (self.marginal_kl - (self.marginal_cross_entropy - self.predictor_entropy)).abs();
        a.max(b).max(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboCheck {
    /// Reconstruction term; zero because the tokenizer maps are identities here.
    pub tokenizer_term: f64,
    /// Denoising terms for `t = 0..steps`.
    pub step_terms: Vec<f64>,
    pub prior_term: f64,
    pub negative_log_likelihood: f64,
    /// Bound minus negative log-likelihood; non-negative up to rounding.
    pub gap: f64,
    pub step_identities: Vec<StepIdentity>,
    pub lt_identity_deviation: f64,
}

fn kl_product(left: &[(usize, f64)], right: &[f64], model: impl Fn(usize, usize) -> f64) -> f64 {
    let mut s = Sum::default();
    for &(a, pa) in left {
        for (c, &pc) in right.iter().enumerate() {
            let w = pa * pc;
            if w > 0.0 {
                s.add(w * (w.ln() - model(a, c).ln()));
            }
        }
    }
    s.value()
}

/// Evaluates every term of the variational bound and the step-loss identities.
pub fn verify_elbo(spec: &TinyChainSpec) -> Result<ElboCheck> {
    spec.validate()?;
    ensure!(
        spec.predictor_is_markov(),
        Validation,
        "the bound assumes unreliable tokens depend on the next state only"
    );
    let paths = Paths::enumerate(spec);
    let (z, k, steps) = (spec.z_states(), spec.k_states(), spec.steps);
    let predictor_row = |t: usize, b: usize| &spec.predictor[t][b * k * k..b * k * k + k];

    // Prior term.
    let mut prior = Sum::default();
    let start_row = predictor_row(steps, spec.all_masked());
    for x0 in 0..k {
        if spec.data[x0] == 0.0 {
            continue;
        }
        let final_states: Vec<(usize, f64)> =
            (0..z).map(|a| (a, paths.marginal_from_next(steps, x0, a))).filter(|&(_, p)| p > 0.0).collect();
        prior.add(spec.data[x0] * kl_product(&final_states, start_row, |a, c| spec.model_start[a * k + c]));
    }

    let mut step_terms = Vec::with_capacity(steps);
    let mut identities = Vec::with_capacity(steps);
    for t in 0..steps {
        let joint = paths.with_unreliable(spec, t + 1);
        let at = |x0: usize, b: usize, c: usize| joint[(x0 * z + b) * k + c];
        let model = &spec.model[t];
        let clean = &spec.clean_model[t];
        let mut term = Sum::default();
        let mut point_mass = Sum::default();
        let mut posterior_kl = Sum::default();
        let mut joint_ce = Sum::default();
        let mut clean_h = Sum::default();
        let mut pred_h = Sum::default();
        let mut marginal_kl = Sum::default();
        let mut marginal_ce = Sum::default();
        for b in 0..z {
            let qbar = predictor_row(t, b);
            let h_bar = -neumaier(qbar.iter().map(|&p| xlogy(p, p)));
            let state_mass = neumaier((0..k).flat_map(|x0| (0..k).map(move |c| (x0, c))).map(|(x0, c)| at(x0, b, c)));
            if state_mass == 0.0 {
                continue;
            }
            let clean_given_state: Vec<f64> =
                (0..k).map(|x0| neumaier((0..k).map(|c| at(x0, b, c))) / state_mass).collect();
            for c in 0..k {
                let pair_mass = neumaier((0..k).map(|x0| at(x0, b, c)));
                if pair_mass == 0.0 {
                    continue;
                }
                let x = spec.decode(b, c);
                let clean_row = &clean[x * k * k..(x + 1) * k * k];
                let marginal: Vec<f64> = (0..k).map(|zb| neumaier((0..k).map(|x0| clean_row[x0 * k + zb]))).collect();
                pred_h.add(pair_mass * h_bar);
                marginal_kl.add(pair_mass * kl_product(&[(0, 1.0)], qbar, |_, zb| marginal[zb]));
                marginal_ce.add(pair_mass * -neumaier(qbar.iter().zip(&marginal).map(|(&q, &m)| xlogy(q, m))));
                let reduced: Vec<(usize, f64)> =
                    clean_given_state.iter().copied().enumerate().filter(|&(_, p)| p > 0.0).collect();
                posterior_kl.add(pair_mass * kl_product(&reduced, qbar, |x0, zb| clean_row[x0 * k + zb]));
                for x0 in 0..k {
                    let w = at(x0, b, c);
                    if w == 0.0 {
                        continue;
                    }
                    let cross = -neumaier((0..k).map(|zb| xlogy(qbar[zb], clean_row[x0 * k + zb])));
                    point_mass.add(w * (cross - h_bar));
                    joint_ce.add(w * cross);
                    clean_h.add(-w * (w / pair_mass).ln());
                    let posterior: Vec<(usize, f64)> =
                        (0..z).map(|a| (a, paths.pair(t, x0, a, b))).filter(|&(_, p)| p > 0.0).collect();
                    let norm = neumaier(posterior.iter().map(|&(_, p)| p));
                    let posterior: Vec<(usize, f64)> = posterior.into_iter().map(|(a, p)| (a, p / norm)).collect();
                    term.add(w * kl_product(&posterior, qbar, |a, zb| model[(x * z + a) * k + zb]));
                }
            }
        }
        step_terms.push(term.value());
        identities.push(StepIdentity {
            point_mass_kl: point_mass.value(),
            posterior_kl: posterior_kl.value(),
            joint_cross_entropy: joint_ce.value(),
            clean_entropy: clean_h.value(),
            predictor_entropy: pred_h.value(),
            marginal_kl: marginal_kl.value(),
            marginal_cross_entropy: marginal_ce.value(),
        });
    }

    // Model likelihood of clean grids, rolled forward from the empty input.
    let mut dist = spec.model_start.clone();
    for t in (0..steps).rev() {
        let mut image = vec![Sum::default(); k];
        for a in 0..z {
            for c in 0..k {
                image[spec.decode(a, c)].add(dist[a * k + c]);
            }
        }
        let model = &spec.model[t];
        dist = (0..z * k).map(|i| neumaier((0..k).map(|x| image[x].value() * model[x * z * k + i]))).collect();
    }
    let mut likelihood = vec![Sum::default(); k];
    for a in 0..z {
        for c in 0..k {
            likelihood[spec.decode_final(a)].add(dist[a * k + c]);
        }
    }
    let nll = -neumaier((0..k).map(|x0| xlogy(spec.data[x0], likelihood[x0].value())));

    let prior_term = prior.value();
    let tokenizer_term = 0.0;
    let bound = neumaier(step_terms.iter().copied().chain([prior_term, tokenizer_term]));
    let lt_identity_deviation = identities.iter().map(StepIdentity::deviation).fold(0.0, f64::max);
    Ok(ElboCheck {
        tokenizer_term,
        step_terms,
        prior_term,
        negative_log_likelihood: nll,
        gap: bound - nll,
        step_identities: identities,
        lt_identity_deviation,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecOutcome {
    pub seed: u64,
    pub positions: usize,
    pub codes: usize,
    pub steps: usize,
    pub bayes_deviation: f64,
    pub bayes_skipped: usize,
    pub markov_deviation: f64,
    pub elbo_gap: f64,
    pub lt_identity_deviation: f64,
    pub passed: bool,
    /// Full tables, kept only for failing specs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tables: Option<TinyChainSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalculusReport {
    pub tolerance: f64,
    pub specs: Vec<SpecOutcome>,
    pub failures: usize,
}

impl CalculusReport {
    pub fn all_passed(&self) -> bool {
        self.failures == 0
    }
}

pub fn check_spec(spec: &TinyChainSpec, seed: u64) -> Result<SpecOutcome> {
    let bayes = verify_bayes(spec)?;
    let markov = verify_markov_reduction(spec)?;
    let elbo = verify_elbo(spec)?;
    let passed = bayes.max_deviation < TOLERANCE
        && markov.max_deviation < TOLERANCE
        && elbo.gap >= -TOLERANCE
        && elbo.lt_identity_deviation < TOLERANCE;
    Ok(SpecOutcome {
        seed,
        positions: spec.positions,
        codes: spec.codes,
        steps: spec.steps,
        bayes_deviation: bayes.max_deviation,
        bayes_skipped: bayes.skipped,
        markov_deviation: markov.max_deviation,
        elbo_gap: elbo.gap,
        lt_identity_deviation: elbo.lt_identity_deviation,
        passed,
        tables: (!passed).then(|| spec.clone()),
    })
}

/// Runs all three verifiers on `count` random specs seeded `first..first + count`.
pub fn verify_random_specs(first: u64, count: u64) -> Result<CalculusReport> {
    let specs = (first..first + count)
        .map(|seed| check_spec(&TinyChainSpec::random(seed), seed))
        .collect::<Result<Vec<_>>>()?;
    let failures = specs.iter().filter(|s| !s.passed).count();
    Ok(CalculusReport { tolerance: TOLERANCE, specs, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_keeps_small_terms() {
        let v = [1.0, 1e-16, 1e-16, 1e-16, 1e-16, -1.0];
        assert_eq!(neumaier(v), 4e-16);
    }

    #[test]
    fn random_specs_pass() {
        let report = verify_random_specs(0, 12).unwrap();
        for s in &report.specs {
            assert!(s.passed, "{s:?}");
        }
    }

    #[test]
    fn deterministic_chain_is_exact() {
        let spec = TinyChainSpec::deterministic(3, 2, 3, 1);
        let b = verify_bayes(&spec).unwrap();
        assert_eq!(b.max_deviation, 0.0);
        assert!(b.skipped > 0);
    }

    #[test]
    fn single_state_chain() {
        let spec = TinyChainSpec::deterministic(1, 1, 1, 0);
        assert_eq!(verify_markov_reduction(&spec).unwrap().max_deviation, 0.0);
        assert_eq!(verify_bayes(&spec).unwrap().max_deviation, 0.0);
    }

    #[test]
    fn leaking_predictor_is_detected() {
        let spec = TinyChainSpec::random(7).with_leaking_predictor(0.6);
        let m = verify_markov_reduction(&spec).unwrap();
        assert!(m.structural_violation);
        assert!(m.max_deviation > 1e-3, "{m:?}");
        assert!(verify_elbo(&spec).is_err());
    }

    /// With a single clean grid and point-mass masking, a model that copies
    /// the true conditionals makes every KL term vanish.
    #[test]
    fn matched_model_closes_the_gap() {
        let mut spec = TinyChainSpec::deterministic(2, 3, 2, 4);
        let (z, k) = (spec.z_states(), spec.k_states());
        let clean = spec.data.iter().position(|&p| p == 1.0).unwrap();
        let mut states = vec![spec.clean_state(clean)];
        for t in 0..spec.steps {
            let a = *states.last().unwrap();
            states.push((0..z).find(|&b| spec.mask_kernel[t][a * z + b] == 1.0).unwrap());
        }
        states.push(spec.all_masked());
        let factor = |spec: &TinyChainSpec, t: usize| -> Vec<f64> {
            let mut row = vec![0.0; z * k];
            let pred = &spec.predictor[t][states[t + 1] * k * k..states[t + 1] * k * k + k];
            row[states[t] * k..states[t] * k + k].copy_from_slice(pred);
            row
        };
        spec.model_start = factor(&spec, spec.steps);
        for t in 0..spec.steps {
            let row = factor(&spec, t);
            spec.model[t] = (0..k).flat_map(|_| row.clone()).collect();
        }
        spec.validate().unwrap();
        let e = verify_elbo(&spec).unwrap();
        assert!(e.step_terms.iter().all(|&v| v.abs() < 1e-12), "{e:?}");
        assert!(e.prior_term.abs() < 1e-12);
        assert!(e.negative_log_likelihood.abs() < 1e-12);
        assert!(e.gap.abs() < 1e-12);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn arbitrary_seeded_specs_satisfy_every_identity(seed in proptest::prelude::any::<u64>()) {
            let out = check_spec(&TinyChainSpec::random(seed), seed).unwrap();
            proptest::prop_assert!(out.passed, "{:?}", out);
        }
    }
}
