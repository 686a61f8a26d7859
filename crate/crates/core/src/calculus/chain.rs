use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{rng, SeededRng};

pub const MAX_POSITIONS: usize = 3;
pub const MAX_CODES: usize = 3;
pub const MAX_STEPS: usize = 3;
const ROW_TOL: f64 = 1e-12;

/// Fully tabulated masked-token chain over a tiny state space.
///
/// Reliable-token states take values `0..codes` per position, with `codes`
/// standing for MASK; they are indexed in base `codes + 1`. Unreliable-token
/// states and images take values `0..codes` per position (base `codes`).
/// Images are decoded deterministically: reliable positions show their
/// token, masked positions show the unreliable token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TinyChainSpec {
    pub positions: usize,
    pub codes: usize,
    pub steps: usize,
    /// Data distribution over clean token grids.
    pub data: Vec<f64>,
    /// `mask_kernel[t][a * Z + b] = q(z_{t+1} = b | z_t = a)` for `t < steps`.
    pub mask_kernel: Vec<Vec<f64>>,
    /// `predictor[t][(z * K + x0) * K + zbar] = q(zbar_t | z_{t+1} = z, z_0 = x0)`
    /// for `t <= steps`. Rows identical across `x0` encode the Markov structure.
    pub predictor: Vec<Vec<f64>>,
    /// `model_start[z * K + zbar] = p(z_T, zbar_T | nothing)`.
    pub model_start: Vec<f64>,
    /// `model[t][x * Z * K + z * K + zbar] = p(z_t, zbar_t | x_{t+1} = x)` for `t < steps`.
    pub model: Vec<Vec<f64>>,
    /// `clean_model[t][x * K * K + z0 * K + zbar] = p(z_0, zbar_t | x_{t+1} = x)`.
    pub clean_model: Vec<Vec<f64>>,
}

impl TinyChainSpec {
    /// Number of reliable-token states.
    pub fn z_states(&self) -> usize {
        (self.codes + 1).pow(self.positions as u32)
    }

    /// Number of clean grids (also unreliable-token states and images).
    pub fn k_states(&self) -> usize {
        self.codes.pow(self.positions as u32)
    }

    pub fn z_digits(&self, z: usize) -> Vec<usize> {
        digits(z, self.codes + 1, self.positions)
    }

    pub fn k_digits(&self, k: usize) -> Vec<usize> {
        digits(k, self.codes, self.positions)
    }

    pub fn all_masked(&self) -> usize {
        self.z_states() - 1
    }

    /// Image shown for reliable state `z` and unreliable state `zbar`.
    pub fn decode(&self, z: usize, zbar: usize) -> usize {
        let zd = self.z_digits(z);
        let bd = self.k_digits(zbar);
        let picked: Vec<usize> = zd.iter().zip(&bd).map(|(&a, &b)| if a == self.codes { b } else { a }).collect();
        undigits(&picked, self.codes)
    }

    /// Image for a final reliable state; masked positions render as code 0.
    pub fn decode_final(&self, z: usize) -> usize {
        let picked: Vec<usize> = self.z_digits(z).iter().map(|&a| if a == self.codes { 0 } else { a }).collect();
        undigits(&picked, self.codes)
    }

    /// Reliable state holding the clean grid `k` at every position.
    pub fn clean_state(&self, k: usize) -> usize {
        undigits(&self.k_digits(k), self.codes + 1)
    }

    /// `b` is reachable from `a` by masking zero or more positions.
    pub fn adds_masks(&self, a: usize, b: usize) -> bool {
        self.z_digits(a).iter().zip(self.z_digits(b)).all(|(&x, y)| y == x || y == self.codes)
    }

    /// Whether the unreliable tokens ignore the clean grid given the next state.
    pub fn predictor_is_markov(&self) -> bool {
        let (z, k) = (self.z_states(), self.k_states());
        self.predictor.iter().all(|table| {
            (0..z).all(|s| (1..k).all(|x0| (0..k).all(|b| table[(s * k + x0) * k + b] == table[s * k * k + b])))
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!((1..=MAX_POSITIONS).contains(&self.positions), Validation, "positions must be in 1..={MAX_POSITIONS}");
        ensure!((1..=MAX_CODES).contains(&self.codes), Validation, "codes must be in 1..={MAX_CODES}");
        ensure!((1..=MAX_STEPS).contains(&self.steps), Validation, "steps must be in 1..={MAX_STEPS}");
        let (z, k) = (self.z_states(), self.k_states());
        check_rows("data", &self.data, k)?;
        ensure!(self.mask_kernel.len() == self.steps, Shape, "need {} mask kernels", self.steps);
        for (t, table) in self.mask_kernel.iter().enumerate() {
            check_rows(&format!("mask_kernel[{t}]"), table, z)?;
            for a in 0..z {
                for b in 0..z {
                    ensure!(
                        table[a * z + b] == 0.0 || self.adds_masks(a, b),
                        Validation,
                        "mask_kernel[{t}] unmasks or rewrites a token ({a} -> {b})"
                    );
                }
            }
        }
        ensure!(self.predictor.len() == self.steps + 1, Shape, "need {} predictor tables", self.steps + 1);
        for (t, table) in self.predictor.iter().enumerate() {
            check_rows(&format!("predictor[{t}]"), table, k)?;
            ensure!(table.len() == z * k * k, Shape, "predictor[{t}] has the wrong size");
        }
        check_rows("model_start", &self.model_start, z * k)?;
        ensure!(self.model.len() == self.steps, Shape, "need {} model tables", self.steps);
        for (t, table) in self.model.iter().enumerate() {
            check_rows(&format!("model[{t}]"), table, z * k)?;
            ensure!(table.len() == k * z * k, Shape, "model[{t}] has the wrong size");
        }
        ensure!(self.clean_model.len() == self.steps, Shape, "need {} clean-model tables", self.steps);
        for (t, table) in self.clean_model.iter().enumerate() {
            check_rows(&format!("clean_model[{t}]"), table, k * k)?;
            ensure!(table.len() == k * k * k, Shape, "clean_model[{t}] has the wrong size");
        }
        Ok(())
    }

    /// Random valid spec with the Markov predictor structure and strictly
    /// positive model tables. About a third of the allowed mask transitions
    /// are dropped so that zero-probability states occur.
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let positions = r.random_range(1..=MAX_POSITIONS);
        let codes = r.random_range(2..=MAX_CODES);
        let steps = r.random_range(1..=MAX_STEPS);
        let mut spec = Self::skeleton(positions, codes, steps);
        let (z, k) = (spec.z_states(), spec.k_states());
        spec.data = positive_row(&mut r, k);
        spec.mask_kernel = (0..steps)
            .map(|_| {
                let mut table = vec![0.0; z * z];
                for a in 0..z {
                    let targets: Vec<usize> = (0..z).filter(|&b| spec.adds_masks(a, b)).collect();
                    let keep = r.random_range(0..targets.len());
                    let mut row = vec![0.0; targets.len()];
                    for (i, w) in row.iter_mut().enumerate() {
                        if i == keep || r.random_bool(0.67) {
                            *w = r.random_range(0.05..1.0);
                        }
                    }
                    let total: f64 = row.iter().sum();
                    for (&b, w) in targets.iter().zip(row) {
                        table[a * z + b] = w / total;
                    }
                }
                table
            })
            .collect();
        spec.predictor = (0..=steps)
            .map(|_| {
                let mut table = Vec::with_capacity(z * k * k);
                for _ in 0..z {
                    let row = positive_row(&mut r, k);
                    for _ in 0..k {
                        table.extend_from_slice(&row);
                    }
                }
                table
            })
            .collect();
        spec.model_start = positive_row(&mut r, z * k);
        spec.model = (0..steps).map(|_| (0..k).flat_map(|_| positive_row(&mut r, z * k)).collect()).collect();
        spec.clean_model = (0..steps).map(|_| (0..k).flat_map(|_| positive_row(&mut r, k * k)).collect()).collect();
        spec
    }

    /// Every transition is a point mass: position `i` is masked at step
    /// `i % steps + 1`. Clean data is a single grid.
    pub fn deterministic(positions: usize, codes: usize, steps: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let mut spec = Self::skeleton(positions, codes, steps);
        let (z, k) = (spec.z_states(), spec.k_states());
        let clean = r.random_range(0..k);
        spec.data = (0..k).map(|i| if i == clean { 1.0 } else { 0.0 }).collect();
        spec.mask_kernel = (0..steps)
            .map(|t| {
                let mut table = vec![0.0; z * z];
                for a in 0..z {
                    let mut d = spec.z_digits(a);
                    for (i, v) in d.iter_mut().enumerate() {
                        if i % steps == t {
                            *v = codes;
                        }
                    }
                    table[a * z + undigits(&d, codes + 1)] = 1.0;
                }
                table
            })
            .collect();
        spec.predictor = (0..=steps)
            .map(|_| {
                let mut table = Vec::with_capacity(z * k * k);
                for _ in 0..z {
                    let row = positive_row(&mut r, k);
                    for _ in 0..k {
                        table.extend_from_slice(&row);
                    }
                }
                table
            })
            .collect();
        spec.model_start = positive_row(&mut r, z * k);
        spec.model = (0..steps).map(|_| (0..k).flat_map(|_| positive_row(&mut r, z * k)).collect()).collect();
        spec.clean_model = (0..steps).map(|_| (0..k).flat_map(|_| positive_row(&mut r, k * k)).collect()).collect();
        spec
    }

    /// Copy of `self` whose unreliable tokens copy the clean grid with
    /// probability `leak`, breaking the Markov structure.
    pub fn with_leaking_predictor(&self, leak: f64) -> Self {
        let (z, k) = (self.z_states(), self.k_states());
        let mut out = self.clone();
        for table in &mut out.predictor {
            for s in 0..z {
                for x0 in 0..k {
                    for b in 0..k {
                        let i = (s * k + x0) * k + b;
                        let hit = if b == x0 { leak } else { 0.0 };
                        table[i] = (1.0 - leak) * table[i] + hit;
                    }
                }
            }
        }
        out
    }

    fn skeleton(positions: usize, codes: usize, steps: usize) -> Self {
        Self {
            positions,
            codes,
            steps,
            data: Vec::new(),
            mask_kernel: Vec::new(),
            predictor: Vec::new(),
            model_start: Vec::new(),
            model: Vec::new(),
            clean_model: Vec::new(),
        }
    }
}

fn digits(mut v: usize, base: usize, len: usize) -> Vec<usize> {
    (0..len)
        .map(|_| {
            let d = v % base;
            v /= base;
            d
        })
        .collect()
}

fn undigits(d: &[usize], base: usize) -> usize {
    d.iter().rev().fold(0, |acc, &x| acc * base + x)
}

fn positive_row(r: &mut SeededRng, len: usize) -> Vec<f64> {
    let row: Vec<f64> = (0..len).map(|_| r.random_range(0.05..1.0)).collect();
    let total: f64 = row.iter().sum();
    row.into_iter().map(|w| w / total).collect()
}

fn check_rows(name: &str, table: &[f64], row_len: usize) -> Result<()> {
    ensure!(
        !table.is_empty() && table.len().is_multiple_of(row_len),
        Shape,
        "{name} has {} entries, not a multiple of {row_len}",
        table.len()
    );
    for (i, row) in table.chunks(row_len).enumerate() {
        ensure!(
            row.iter().all(|&p| (0.0..=1.0).contains(&p)),
            Validation,
            "{name} row {i} has an entry outside [0, 1]"
        );
        let total: f64 = super::neumaier(row.iter().copied());
        ensure!((total - 1.0).abs() <= ROW_TOL, Validation, "{name} row {i} sums to {total}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_specs_are_valid_and_markov() {
        for seed in 0..20 {
            let s = TinyChainSpec::random(seed);
            s.validate().unwrap();
            assert!(s.predictor_is_markov());
        }
        let d = TinyChainSpec::deterministic(3, 2, 2, 0);
        d.validate().unwrap();
        assert!(!TinyChainSpec::random(1).with_leaking_predictor(0.5).predictor_is_markov());
    }

    #[test]
    fn state_coding() {
        let s = TinyChainSpec::random(3);
        for z in 0..s.z_states() {
            assert_eq!(undigits(&s.z_digits(z), s.codes + 1), z);
        }
        assert!(s.z_digits(s.all_masked()).iter().all(|&d| d == s.codes));
        let s = TinyChainSpec::deterministic(2, 3, 1, 0);
        // z = (token 1, MASK), zbar = (2, 0) -> image (1, 0)
        let z = undigits(&[1, 3], 4);
        let zbar = undigits(&[2, 0], 3);
        assert_eq!(s.decode(z, zbar), undigits(&[1, 0], 3));
        assert!(s.adds_masks(z, undigits(&[3, 3], 4)));
        assert!(!s.adds_masks(undigits(&[3, 3], 4), z));
    }

    #[test]
    fn bad_rows_are_rejected() {
        let mut s = TinyChainSpec::random(4);
        s.data[0] += 1e-9;
        assert!(s.validate().is_err());
    }
}
