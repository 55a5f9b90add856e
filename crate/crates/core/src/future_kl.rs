//! Future-KL credit assignment.
//!
//! For a response sampled from the rollout policy, the per-token probability
//! shift `Δlog p_t = log π_θ(o_t|·) − log π_old(o_t|·)` measures how far the
//! current policy has moved on that token. Future-KL aggregates the shift
//! of the token and everything after it, discounted by distance and with
//! tokens whose importance ratio exceeds the safety threshold removed:
//!
//! ```text
//! FutureKL_t = Σ_{k=t}^{T} M_k · γ^{k−t} · Δlog p_k,   M_k = 1[ratio_k ≤ c],   γ = 2^(−1/τ)
//! f_t        = clip(exp(FutureKL_t), 1 − ε_low, 1 + ε_high)
//! Ã_t        = Â_t · f_t
//! ```
//!
//! with `f_t` reset to 1 on negative-advantage tokens whose ratio exceeds the
//! threshold. Two kernels compute the discounted sum: a direct double loop
//! ([`future_kl_naive`]) that serves as the reference, and a chunked kernel
//! ([`future_kl_chunked`], [`future_kl_chunked_batch`]) that never holds more
//! than one `L × K` block of decay weights.

use serde::{Deserialize, Serialize};

use crate::{FipoError, Result};

/// Horizons at or above this value mean "no decay" (γ = 1).
pub const INFINITE_HORIZON: f64 = 1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FutureKlConfig {
    /// Effective horizon (half-life, in tokens) of the decay window.
    pub tau: f64,
    /// Importance-ratio cutoff for the stability mask and the negative
    /// advantage reset.
    pub safety_threshold: f64,
    /// Influence weight interval `[1 − ε_low, 1 + ε_high]`.
    pub f_clip: [f64; 2],
    pub chunk_size: usize,
    /// Apply the stability mask. Off only for ablations.
    pub filtering: bool,
    /// Treat `f` as a constant coefficient in the loss gradient.
    pub detach_weight: bool,
}

impl Default for FutureKlConfig {
    fn default() -> Self {
        FutureKlConfig {
            tau: 32.0,
            safety_threshold: 10.0,
            f_clip: [1.0, 1.2],
            chunk_size: 256,
            filtering: true,
            detach_weight: true,
        }
    }
}

impl FutureKlConfig {
    pub fn gamma(&self) -> f64 {
        gamma_from_tau(self.tau)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(FipoError::config("fipo.tau", "must be positive"));
        }
        if !(self.safety_threshold > 1.0) {
            return Err(FipoError::config("fipo.safety_threshold", "must exceed 1"));
        }
        let [lo, hi] = self.f_clip;
        if !(0.0 <= lo && lo <= 1.0 && hi > 1.0 && hi.is_finite()) {
            return Err(FipoError::config(
                "fipo.f_clip",
                format!("need 0 <= low <= 1 < high, got [{lo}, {hi}]"),
            ));
        }
        if self.chunk_size == 0 {
            return Err(FipoError::config("fipo.chunk_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// `γ = 2^(−1/τ)`, with `τ ≥ INFINITE_HORIZON` mapped to exactly 1.
pub fn gamma_from_tau(tau: f64) -> f64 {
    if tau >= INFINITE_HORIZON {
        1.0
    } else {
        2f64.powf(-1.0 / tau)
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(FipoError::Input(format!("{what}: length mismatch ({a} vs {b})")))
    }
}

pub fn delta_log_p(current_lp: &[f64], old_lp: &[f64]) -> Result<Vec<f64>> {
    check_len(current_lp.len(), old_lp.len(), "delta_log_p")?;
    Ok(current_lp.iter().zip(old_lp).map(|(c, o)| c - o).collect())
}

/// `M_k = 1` iff `exp(Δlog p_k) ≤ c`. Compared in log space so huge shifts
/// cannot overflow.
pub fn stability_mask(current_lp: &[f64], old_lp: &[f64], safety_threshold: f64) -> Result<Vec<bool>> {
    check_len(current_lp.len(), old_lp.len(), "stability_mask")?;
    let log_c = safety_threshold.ln();
    Ok(current_lp
        .iter()
        .zip(old_lp)
        .map(|(c, o)| c - o <= log_c)
        .collect())
}

/// Reference O(L²) evaluation of the masked, discounted suffix sum.
pub fn future_kl_naive(delta: &[f64], mask: &[bool], gamma: f64) -> Result<Vec<f64>> {
    check_len(delta.len(), mask.len(), "future_kl_naive")?;
    let n = delta.len();
    let powers: Vec<f64> = (0..n).map(|d| gamma.powi(d as i32)).collect();
    Ok((0..n)
        .map(|t| {
            (t..n)
                .filter(|&k| mask[k])
                .map(|k| powers[k - t] * delta[k])
                .sum()
        })
        .collect())
}

/// Chunked Future-KL for one sequence.
pub fn future_kl_chunked(delta: &[f64], mask: &[bool], gamma: f64, chunk_size: usize) -> Result<Vec<f64>> {
    check_len(delta.len(), mask.len(), "future_kl_chunked")?;
    future_kl_chunked_batch(delta, mask, 1, delta.len(), gamma, chunk_size)
}

/// Chunked Future-KL over a row-major `batch × len` matrix of shifts.
///
/// Padding positions must carry `mask = false`. The sequence axis is cut
/// into blocks of `chunk_size` columns; for each block a `len × K` decay
/// matrix `W[i][j] = γ^(j−i) · 1[j ≥ i]` is built and every row accumulates
/// `F[b, i] += Σ_j V[b, j] · W[i][j]`. Auxiliary storage is one block plus
/// a length-`len` table of decay powers.
pub fn future_kl_chunked_batch(
    delta: &[f64],
    mask: &[bool],
    batch: usize,
    len: usize,
    gamma: f64,
    chunk_size: usize,
) -> Result<Vec<f64>> {
    if chunk_size == 0 {
        return Err(FipoError::Input("chunk size must be at least 1".into()));
    }
    check_len(delta.len(), batch * len, "future_kl_chunked_batch delta")?;
    check_len(mask.len(), batch * len, "future_kl_chunked_batch mask")?;

    let masked: Vec<f64> = delta
        .iter()
        .zip(mask)
        .map(|(&d, &m)| if m { d } else { 0.0 })
        .collect();
    let powers: Vec<f64> = (0..len).map(|d| gamma.powi(d as i32)).collect();
    let mut out = vec![0.0; batch * len];
    let mut block = vec![0.0; len * chunk_size.min(len.max(1))];

    let mut start = 0;
    while start < len {
        let end = (start + chunk_size).min(len);
        let width = end - start;
        // rows at or past `end` are all zero and never read
        for i in 0..end {
            let row = &mut block[i * width..(i + 1) * width];
            for (jj, w) in row.iter_mut().enumerate() {
                let j = start + jj;
                *w = if j >= i { powers[j - i] } else { 0.0 };
            }
        }
        for b in 0..batch {
            let v = &masked[b * len + start..b * len + end];
            let f = &mut out[b * len..(b + 1) * len];
            // rows before `start` only see the block through j >= i, rows
            // past `end` see nothing
            for (i, fi) in f.iter_mut().enumerate().take(end) {
                let w = &block[i * width..(i + 1) * width];
                *fi += v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        start = end;
    }
    Ok(out)
}

/// Influence weights before and after clipping / reset.
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceWeights {
    /// `exp(FutureKL_t)`.
    pub raw: Vec<f64>,
    /// Clipped and reset `f_t`.
    pub weight: Vec<f64>,
    /// Positions where the negative-advantage reset fired.
    pub reset: Vec<bool>,
}

pub fn influence_weight(
    future_kl: &[f64],
    advantage: &[f64],
    ratio: &[f64],
    cfg: &FutureKlConfig,
) -> Result<InfluenceWeights> {
    check_len(future_kl.len(), advantage.len(), "influence_weight advantage")?;
    check_len(future_kl.len(), ratio.len(), "influence_weight ratio")?;
    let [lo, hi] = cfg.f_clip;
    let raw: Vec<f64> = future_kl.iter().map(|v| v.exp()).collect();
    let reset: Vec<bool> = advantage
        .iter()
        .zip(ratio)
        .map(|(&a, &r)| a < 0.0 && r > cfg.safety_threshold)
        .collect();
    let weight = raw
        .iter()
        .zip(&reset)
        .map(|(&w, &reset)| if reset { 1.0 } else { w.clamp(lo, hi) })
        .collect();
    Ok(InfluenceWeights { raw, weight, reset })
}

pub fn reweighted_advantage(advantage: &[f64], weight: &[f64]) -> Result<Vec<f64>> {
    check_len(advantage.len(), weight.len(), "reweighted_advantage")?;
    Ok(advantage.iter().zip(weight).map(|(a, f)| a * f).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceMetrics {
    pub mean_weight: f64,
    /// Share of positions whose raw weight fell outside the clip interval.
    pub clip_fraction: f64,
}

pub fn influence_metrics(weight: &[f64], raw: &[f64], cfg: &FutureKlConfig) -> Result<InfluenceMetrics> {
    check_len(weight.len(), raw.len(), "influence_metrics")?;
    if weight.is_empty() {
        return Ok(InfluenceMetrics {
            mean_weight: 1.0,
            clip_fraction: 0.0,
        });
    }
    let [lo, hi] = cfg.f_clip;
    let n = weight.len() as f64;
    let clipped = raw.iter().filter(|&&w| w < lo || w > hi).count();
    Ok(InfluenceMetrics {
        mean_weight: weight.iter().sum::<f64>() / n,
        clip_fraction: clipped as f64 / n,
    })
}

/// Per-token credit for one response.
#[derive(Clone, Debug, PartialEq)]
pub struct CreditTensors {
    pub delta: Vec<f64>,
    pub mask: Vec<bool>,
    pub future_kl: Vec<f64>,
    pub raw_weight: Vec<f64>,
    pub weight: Vec<f64>,
    pub reset: Vec<bool>,
    pub advantage: Vec<f64>,
}

impl CreditTensors {
    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }
}

/// Builds the credit tensors for a mini-batch of responses with the chunked
/// batch kernel. `advantage[i]` is the scalar group advantage of response
/// `i`, broadcast along its tokens.
pub fn credit_tensors(
    current_lp: &[&[f64]],
    old_lp: &[&[f64]],
    advantage: &[f64],
    cfg: &FutureKlConfig,
) -> Result<Vec<CreditTensors>> {
    check_len(current_lp.len(), old_lp.len(), "credit_tensors")?;
    check_len(current_lp.len(), advantage.len(), "credit_tensors advantage")?;
    let batch = current_lp.len();
    let len = current_lp.iter().map(|s| s.len()).max().unwrap_or(0);

    let mut deltas = Vec::with_capacity(batch);
    let mut masks = Vec::with_capacity(batch);
    let mut padded_delta = vec![0.0; batch * len];
    let mut padded_mask = vec![false; batch * len];
    for i in 0..batch {
        let d = delta_log_p(current_lp[i], old_lp[i])?;
        let m = if cfg.filtering {
            stability_mask(current_lp[i], old_lp[i], cfg.safety_threshold)?
        } else {
            vec![true; d.len()]
        };
        padded_delta[i * len..i * len + d.len()].copy_from_slice(&d);
        padded_mask[i * len..i * len + m.len()].copy_from_slice(&m);
        deltas.push(d);
        masks.push(m);
    }
    let fkl = future_kl_chunked_batch(&padded_delta, &padded_mask, batch, len, cfg.gamma(), cfg.chunk_size)?;

    let mut out = Vec::with_capacity(batch);
    for (i, (delta, mask)) in deltas.into_iter().zip(masks).enumerate() {
        let n = delta.len();
        let future_kl = fkl[i * len..i * len + n].to_vec();
        let adv = vec![advantage[i]; n];
        let ratio: Vec<f64> = delta.iter().map(|d| d.exp()).collect();
        let w = influence_weight(&future_kl, &adv, &ratio, cfg)?;
        let tilde = reweighted_advantage(&adv, &w.weight)?;
        out.push(CreditTensors {
            delta,
            mask,
            future_kl,
            raw_weight: w.raw,
            weight: w.weight,
            reset: w.reset,
            advantage: tilde,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn gamma_values() {
        assert_eq!(gamma_from_tau(1.0), 0.5);
        assert_eq!(gamma_from_tau(INFINITE_HORIZON), 1.0);
        assert_eq!(gamma_from_tau(2e9), 1.0);
        // 2^(-1/32), evaluated independently
        assert!((gamma_from_tau(32.0) - 0.978_572_062_087_700_1).abs() < 1e-15);
    }

    #[test]
    fn delta_cases() {
        let a = [-1.0, -2.0, -0.5];
        let b = [-1.1, -1.5, -0.5];
        assert_eq!(delta_log_p(&a, &a).unwrap(), vec![0.0; 3]);
        let shifted: Vec<f64> = a.iter().map(|x| x + 0.1).collect();
        assert!(close(&delta_log_p(&shifted, &a).unwrap(), &[0.1; 3], 1e-15));
        let ab = delta_log_p(&a, &b).unwrap();
        let ba = delta_log_p(&b, &a).unwrap();
        assert!(ab.iter().zip(&ba).all(|(x, y)| *x == -*y));
        assert!(delta_log_p(&a, &b[..2]).is_err());
    }

    #[test]
    fn mask_threshold() {
        let c = 10.0;
        let old = [-2.0, -2.0, -2.0];
        assert_eq!(stability_mask(&old, &old, c).unwrap(), vec![true; 3]);
        let cur = [-2.0, -2.0 + (2.0 * c).ln(), -2.0];
        assert_eq!(stability_mask(&cur, &old, c).unwrap(), vec![true, false, true]);
    }

    #[test]
    fn naive_hand_values() {
        let m = [true; 3];
        let v = future_kl_naive(&[0.1, 0.1, 0.1], &m, gamma_from_tau(INFINITE_HORIZON)).unwrap();
        assert!(close(&v, &[0.3, 0.2, 0.1], 1e-15));
        let v = future_kl_naive(&[0.0, 0.4, 0.8], &m, gamma_from_tau(1.0)).unwrap();
        assert!(close(&v, &[0.4, 0.8, 0.8], 1e-15));
    }

    #[test]
    fn masking_removes_exactly_one_term() {
        let delta = [0.3, -0.2, 0.5, 0.7, -0.1];
        let g = 0.8;
        let full = future_kl_naive(&delta, &[true; 5], g).unwrap();
        let k = 3;
        let mut mask = [true; 5];
        mask[k] = false;
        let holed = future_kl_naive(&delta, &mask, g).unwrap();
        for t in 0..5 {
            let removed = if t <= k { g.powi((k - t) as i32) * delta[k] } else { 0.0 };
            assert!((full[t] - holed[t] - removed).abs() < 1e-15);
        }
    }

    #[test]
    fn chunked_block_extremes() {
        let delta: Vec<f64> = (0..37).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
        let mask: Vec<bool> = (0..37).map(|i| i % 5 != 2).collect();
        let g = gamma_from_tau(8.0);
        let naive = future_kl_naive(&delta, &mask, g).unwrap();
        for k in [1, 7, 36, 37, 500] {
            let c = future_kl_chunked(&delta, &mask, g, k).unwrap();
            assert!(close(&c, &naive, 1e-12), "K = {k}");
        }
        assert!(future_kl_chunked(&delta, &mask, g, 0).is_err());
        assert_eq!(future_kl_chunked(&[], &[], g, 4).unwrap(), Vec::<f64>::new());
    }

    #[test]
    fn influence_weight_cases() {
        let cfg = FutureKlConfig::default();
        let w = influence_weight(&[0.0], &[1.0], &[1.0], &cfg).unwrap();
        assert_eq!(w.weight, vec![1.0]);

        let w = influence_weight(&[0.5], &[1.0], &[1.0], &cfg).unwrap();
        assert!((w.raw[0] - 1.648_721_270_700_128).abs() < 1e-12);
        assert_eq!(w.weight, vec![1.2]);

        let cfg7b = FutureKlConfig {
            f_clip: [0.8, 1.2],
            ..cfg.clone()
        };
        let w = influence_weight(&[-0.3], &[1.0], &[1.0], &cfg7b).unwrap();
        assert!((w.raw[0] - 0.740_818_220_681_717_8).abs() < 1e-12);
        assert_eq!(w.weight, vec![0.8]);

        let w = influence_weight(&[5.0], &[-1.0], &[2.0 * cfg.safety_threshold], &cfg).unwrap();
        assert_eq!(w.weight, vec![1.0]);
        assert_eq!(w.reset, vec![true]);
        // positive advantage is not reset
        let w = influence_weight(&[5.0], &[1.0], &[2.0 * cfg.safety_threshold], &cfg).unwrap();
        assert_eq!(w.weight, vec![1.2]);
    }

    #[test]
    fn reweighting() {
        assert_eq!(reweighted_advantage(&[1.0, -2.0], &[1.0, 1.0]).unwrap(), vec![1.0, -2.0]);
        assert_eq!(reweighted_advantage(&[1.0], &[1.2]).unwrap(), vec![1.2]);
    }

    #[test]
    fn metric_cases() {
        let cfg = FutureKlConfig::default();
        let m = influence_metrics(&[1.0; 4], &[1.0; 4], &cfg).unwrap();
        assert_eq!((m.mean_weight, m.clip_fraction), (1.0, 0.0));
        let m = influence_metrics(&[1.2; 3], &[2.0, 3.0, 1.5], &cfg).unwrap();
        assert_eq!(m.clip_fraction, 1.0);
    }

    #[test]
    fn identity_at_rollout() {
        let lp: Vec<f64> = vec![-0.5, -1.5, -2.0, -0.1];
        let lp2: Vec<f64> = vec![-0.3, -0.9];
        let cfg = FutureKlConfig::default();
        let ct = credit_tensors(&[&lp, &lp2], &[&lp, &lp2], &[0.7, -1.3], &cfg).unwrap();
        assert_eq!(ct[0].future_kl, vec![0.0; 4]);
        assert_eq!(ct[0].weight, vec![1.0; 4]);
        assert_eq!(ct[0].advantage, vec![0.7; 4]);
        assert_eq!(ct[1].advantage, vec![-1.3; 2]);
    }

    #[test]
    fn config_validation() {
        assert!(FutureKlConfig::default().validate().is_ok());
        let bad = |f: fn(&mut FutureKlConfig)| {
            let mut c = FutureKlConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.tau = 0.0));
        assert!(bad(|c| c.safety_threshold = 1.0));
        assert!(bad(|c| c.f_clip = [1.1, 1.2]));
        assert!(bad(|c| c.chunk_size = 0));
    }

    fn inputs() -> impl Strategy<Value = (Vec<f64>, Vec<bool>, f64, usize)> {
        (1usize..80).prop_flat_map(|n| {
            (
                proptest::collection::vec(-2.0f64..2.0, n),
                proptest::collection::vec(proptest::bool::weighted(0.85), n),
                prop_oneof![Just(1.0), Just(8.0), Just(32.0), 0.5f64..300.0, Just(INFINITE_HORIZON)],
                1usize..(n + 3),
            )
        })
    }

    proptest! {
        #[test]
        fn chunked_matches_naive((delta, mask, tau, k) in inputs()) {
            let g = gamma_from_tau(tau);
            let a = future_kl_naive(&delta, &mask, g).unwrap();
            let b = future_kl_chunked(&delta, &mask, g, k).unwrap();
            prop_assert!(close(&a, &b, 1e-9));
        }

        #[test]
        fn discounted_recursion_holds((delta, mask, tau, k) in inputs()) {
            let g = gamma_from_tau(tau);
            let f = future_kl_chunked(&delta, &mask, g, k).unwrap();
            let n = delta.len();
            for t in 0..n {
                let next = if t + 1 < n { f[t + 1] } else { 0.0 };
                let m = if mask[t] { 1.0 } else { 0.0 };
                prop_assert!((f[t] - (m * delta[t] + g * next)).abs() <= 1e-12 * (1.0 + f[t].abs()));
            }
        }

        #[test]
        fn horizon_is_monotone_for_positive_shifts(
            delta in proptest::collection::vec(0.0f64..1.0, 1..40),
            t1 in 0.5f64..100.0, dt in 0.0f64..100.0,
        ) {
            let m = vec![true; delta.len()];
            let short = future_kl_naive(&delta, &m, gamma_from_tau(t1)).unwrap();
            let long = future_kl_naive(&delta, &m, gamma_from_tau(t1 + dt)).unwrap();
            for (s, l) in short.iter().zip(&long) {
                prop_assert!(*l >= *s - 1e-12);
            }
        }

        #[test]
        fn weight_stays_in_interval(
            fkl in proptest::collection::vec(-50.0f64..50.0, 1..30),
            lo in 0.0f64..1.0, hi in 1.0001f64..3.0, seed in 0u64..1000,
        ) {
            let cfg = FutureKlConfig { f_clip: [lo, hi], ..Default::default() };
            let n = fkl.len();
            let adv: Vec<f64> = (0..n).map(|i| if (seed + i as u64) % 3 == 0 { -1.0 } else { 0.5 }).collect();
            let ratio: Vec<f64> = (0..n).map(|i| ((seed * 31 + i as u64) % 25) as f64).collect();
            let w = influence_weight(&fkl, &adv, &ratio, &cfg).unwrap();
            for i in 0..n {
                prop_assert!(w.weight[i] >= lo && w.weight[i] <= hi);
                if adv[i] < 0.0 && ratio[i] > cfg.safety_threshold {
                    prop_assert_eq!(w.weight[i], 1.0);
                }
                let at = reweighted_advantage(&adv, &w.weight).unwrap();
                prop_assert_eq!(at[i].signum(), adv[i].signum());
            }
            let m = influence_metrics(&w.weight, &w.raw, &cfg).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.clip_fraction));
        }
    }
}
