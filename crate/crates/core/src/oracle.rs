//! Randomized equivalence sweep between the chunked Future-KL kernel and
//! the quadratic reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::future_kl::{future_kl_chunked_batch, future_kl_naive, gamma_from_tau, INFINITE_HORIZON};
use crate::{FipoError, Result};

pub const TAUS: [f64; 5] = [1.0, 8.0, 32.0, 256.0, INFINITE_HORIZON];
pub const FIXED_CHUNKS: [usize; 4] = [1, 7, 32, 256];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub cases: usize,
    pub max_batch: usize,
    pub max_len: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Test hook: adds this offset to one chunked output per case.
    pub inject_fault: Option<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            cases: 1000,
            max_batch: 8,
            max_len: 1024,
            seed: 0,
            tolerance: 1e-9,
            inject_fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCase {
    pub batch: usize,
    pub len: usize,
    pub chunk_size: usize,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cases: usize,
    pub max_dev: f64,
    pub worst: Option<SweepCase>,
    pub passed: bool,
}

/// Case `n` cycles through every (K, τ) pair so each combination is covered
/// at least `cases / 25` times; lengths mix the edges 1 and `max_len` with
/// uniform draws.
fn draw_case<R: Rng>(n: usize, cfg: &SweepConfig, rng: &mut R) -> SweepCase {
    let batch = rng.gen_range(1..=cfg.max_batch);
    let len = match n % 10 {
        0 => 1,
        1 => cfg.max_len,
        _ => rng.gen_range(1..=cfg.max_len),
    };
    let k_slot = (n / TAUS.len()) % (FIXED_CHUNKS.len() + 1);
    let chunk_size = FIXED_CHUNKS.get(k_slot).copied().unwrap_or(len);
    SweepCase {
        batch,
        len,
        chunk_size,
        tau: TAUS[n % TAUS.len()],
    }
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    if cfg.max_batch == 0 || cfg.max_len == 0 {
        return Err(FipoError::Input("sweep needs max_batch ≥ 1 and max_len ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_dev: f64 = 0.0;
    let mut worst = None;
    for n in 0..cfg.cases {
        let case = draw_case(n, cfg, &mut rng);
        let size = case.batch * case.len;
        let delta: Vec<f64> = (0..size).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask: Vec<bool> = (0..size).map(|_| rng.gen_bool(0.9)).collect();
        let gamma = gamma_from_tau(case.tau);
        let mut fast = future_kl_chunked_batch(&delta, &mask, case.batch, case.len, gamma, case.chunk_size)?;
        if let Some(offset) = cfg.inject_fault {
            let i = rng.gen_range(0..size);
            fast[i] += offset;
        }
        for b in 0..case.batch {
            let row = b * case.len..(b + 1) * case.len;
            let slow = future_kl_naive(&delta[row.clone()], &mask[row.clone()], gamma)?;
            let dev = slow
                .iter()
                .zip(&fast[row])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if dev > max_dev || dev.is_nan() {
                max_dev = dev;
                worst = Some(case.clone());
            }
        }
    }
    Ok(SweepReport {
        cases: cfg.cases,
        max_dev,
        passed: max_dev <= cfg.tolerance,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sweep_passes_and_fault_is_caught() {
        let cfg = SweepConfig {
            cases: 50,
            max_len: 64,
            ..SweepConfig::default()
        };
        assert!(run_sweep(&cfg).unwrap().passed);
        let bad = SweepConfig {
            inject_fault: Some(1e-6),
            ..cfg
        };
        let r = run_sweep(&bad).unwrap();
        assert!(!r.passed && r.max_dev >= 1e-6 * 0.99);
    }

    #[test]
    fn length_one_edge() {
        let cfg = SweepConfig {
            cases: 25,
            max_len: 1,
            ..SweepConfig::default()
        };
        let r = run_sweep(&cfg).unwrap();
        assert!(r.passed);
        assert_eq!(r.max_dev, 0.0);
    }

    #[test]
    fn every_chunk_and_horizon_is_covered() {
        let cfg = SweepConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::BTreeSet::new();
        for n in 0..cfg.cases {
            let c = draw_case(n, &cfg, &mut rng);
            let k = if c.chunk_size == c.len && !FIXED_CHUNKS.contains(&c.chunk_size) {
                0
            } else {
                c.chunk_size
            };
            seen.insert((k, c.tau.to_bits()));
        }
        assert!(seen.len() >= 25);
    }
}
