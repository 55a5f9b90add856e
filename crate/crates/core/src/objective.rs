//! Surrogate losses: GRPO, DAPO (token-level) and FIPO.
//!
//! Every loss is returned as the value to *minimise* (the negated surrogate
//! objective) together with `∂loss/∂ log π_θ(o_t)` for each response token,
//! which [`crate::policy::backward`] turns into a parameter gradient.

use serde::{Deserialize, Serialize};

use crate::future_kl::{influence_metrics, CreditTensors, FutureKlConfig, InfluenceMetrics};
use crate::{FipoError, Result};

/// Log-ratios are clamped to this magnitude before exponentiation.
pub const MAX_LOG_RATIO: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Grpo,
    Dapo,
    Fipo,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Grpo => "grpo",
            LossKind::Dapo => "dapo",
            LossKind::Fipo => "fipo",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = FipoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(LossKind::Grpo),
            "dapo" => Ok(LossKind::Dapo),
            "fipo" => Ok(LossKind::Fipo),
            other => Err(FipoError::config(
                "loss.kind",
                format!("unknown loss `{other}` (expected grpo, dapo or fipo)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub dual_clip_c: f64,
    pub kl_beta: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            eps_low: 0.2,
            eps_high: 0.28,
            dual_clip_c: 10.0,
            kl_beta: 0.0,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, e) in [("loss.eps_low", self.eps_low), ("loss.eps_high", self.eps_high)] {
            if !(e > 0.0 && e < 1.0) {
                return Err(FipoError::config(key, "must lie in (0, 1)"));
            }
        }
        if !(self.dual_clip_c > 1.0 + self.eps_high) {
            return Err(FipoError::config("loss.dual_clip_c", "must exceed 1 + eps_high"));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(FipoError::config("loss.kl_beta", "must be non-negative"));
        }
        Ok(())
    }
}

/// Per-token importance ratios with the count of clamped log-ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct Ratios {
    pub ratio: Vec<f64>,
    pub overflows: usize,
}

pub fn importance_ratio(current_lp: &[f64], old_lp: &[f64]) -> Result<Ratios> {
    if current_lp.len() != old_lp.len() {
        return Err(FipoError::Input(format!(
            "importance_ratio: length mismatch ({} vs {})",
            current_lp.len(),
            old_lp.len()
        )));
    }
    let mut overflows = 0;
    let ratio = current_lp
        .iter()
        .zip(old_lp)
        .map(|(c, o)| {
            let d = c - o;
            if d.abs() > MAX_LOG_RATIO {
                overflows += 1;
            }
            d.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp()
        })
        .collect();
    Ok(Ratios { ratio, overflows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Unclipped,
    Clipped,
    DualFloor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenTerm {
    pub value: f64,
    pub branch: Branch,
    /// Multiplier `s` with `value = s · advantage`.
    pub slope: f64,
}

fn token_term(r: f64, adv: f64, cfg: &ClipConfig, dual: bool) -> TokenTerm {
    let clipped_r = r.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
    let unclipped = r * adv;
    let clipped = clipped_r * adv;
    let mut term = if clipped < unclipped {
        TokenTerm {
            value: clipped,
            branch: Branch::Clipped,
            slope: clipped_r,
        }
    } else {
        TokenTerm {
            value: unclipped,
            branch: Branch::Unclipped,
            slope: r,
        }
    };
    if dual && adv < 0.0 {
        let floor = cfg.dual_clip_c * adv;
        if floor > term.value {
            term = TokenTerm {
                value: floor,
                branch: Branch::DualFloor,
                slope: cfg.dual_clip_c,
            };
        }
    }
    term
}

/// `min(r·A, clip(r, 1−ε_low, 1+ε_high)·A)`, floored at `c·A` when `A < 0`.
pub fn clipped_token_term(r: f64, adv: f64, cfg: &ClipConfig) -> f64 {
    token_term(r, adv, cfg, true).value
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    /// Share of tokens where the clipped branch is strictly selected.
    pub policy_clip_fraction: f64,
    /// Share of negative-advantage tokens where the dual-clip floor binds.
    pub low_clip_fraction: f64,
    pub policy_kl: f64,
    pub token_count: usize,
    pub ratio_overflows: usize,
    pub influence: Option<InfluenceMetrics>,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub report: LossReport,
    /// `∂loss/∂ current_lp`, one vector per response.
    pub grad_lp: Vec<Vec<f64>>,
}

/// Log-probs and advantage of one response inside a loss batch.
#[derive(Clone, Copy, Debug)]
pub struct SequenceInputs<'a> {
    pub current_lp: &'a [f64],
    pub old_lp: &'a [f64],
    /// Scalar group advantage `Â_i`.
    pub advantage: f64,
}

/// Footnote-style policy KL: mean of `old − current` over all tokens.
pub fn policy_kl(current_lp: &[f64], old_lp: &[f64]) -> Result<f64> {
    if current_lp.len() != old_lp.len() {
        return Err(FipoError::Input(format!(
            "policy_kl: token count mismatch ({} vs {})",
            current_lp.len(),
            old_lp.len()
        )));
    }
    if current_lp.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = old_lp.iter().zip(current_lp).map(|(o, c)| o - c).sum();
    Ok(s / current_lp.len() as f64)
}

fn batch_policy_kl(seqs: &[SequenceInputs]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for q in seqs {
        s += q.old_lp.iter().zip(q.current_lp).map(|(o, c)| o - c).sum::<f64>();
        n += q.current_lp.len();
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn check_batch(seqs: &[SequenceInputs]) -> Result<usize> {
    if seqs.is_empty() {
        return Err(FipoError::Input("loss batch is empty".into()));
    }
    let mut n = 0;
    for (i, q) in seqs.iter().enumerate() {
        if q.current_lp.len() != q.old_lp.len() || q.current_lp.is_empty() {
            return Err(FipoError::Input(format!(
                "response {i}: current/old log-probs have lengths {} / {}",
                q.current_lp.len(),
                q.old_lp.len()
            )));
        }
        n += q.current_lp.len();
    }
    Ok(n)
}

/// Token-normalised clipped surrogate shared by DAPO and FIPO.
fn token_level_loss(
    seqs: &[SequenceInputs],
    credits: Option<(&[CreditTensors], &FutureKlConfig)>,
    cfg: &ClipConfig,
) -> Result<LossOutput> {
    let n_tokens = check_batch(seqs)?;
    if let Some((c, _)) = credits {
        if c.len() != seqs.len() || c.iter().zip(seqs).any(|(c, q)| c.len() != q.current_lp.len()) {
            return Err(FipoError::Input("credit tensors do not match the loss batch".into()));
        }
    }
    let norm = 1.0 / n_tokens as f64;
    let mut total = 0.0;
    let (mut clipped, mut floored, mut negatives, mut overflows) = (0usize, 0usize, 0usize, 0usize);
    let mut grad_lp = Vec::with_capacity(seqs.len());
    let mut all_w = Vec::new();
    let mut all_raw = Vec::new();

    for (i, q) in seqs.iter().enumerate() {
        let ratios = importance_ratio(q.current_lp, q.old_lp)?;
        overflows += ratios.overflows;
        let credit = credits.map(|(c, _)| &c[i]);
        let mut g = vec![0.0; q.current_lp.len()];
        // ∂loss/∂Ã_t, for differentiating through the influence weight
        let mut g_adv = vec![0.0; q.current_lp.len()];
        for t in 0..q.current_lp.len() {
            let adv = credit.map_or(q.advantage, |c| c.advantage[t]);
            let r = ratios.ratio[t];
            let term = token_term(r, adv, cfg, true);
            total += term.value;
            match term.branch {
                Branch::Clipped => clipped += 1,
                Branch::DualFloor => floored += 1,
                Branch::Unclipped => {
                    let d = q.current_lp[t] - q.old_lp[t];
                    if d.abs() <= MAX_LOG_RATIO {
                        g[t] = -norm * adv * r;
                    }
                }
            }
            if adv < 0.0 {
                negatives += 1;
            }
            g_adv[t] = -norm * term.slope;
        }

        if let Some((c, fcfg)) = credits {
            let c = &c[i];
            all_w.extend_from_slice(&c.weight);
            all_raw.extend_from_slice(&c.raw_weight);
            if !fcfg.detach_weight {
                through_weight(&mut g, &g_adv, c, q.advantage, fcfg);
            }
        }
        grad_lp.push(g);
    }

    let influence = match credits {
        Some((_, fcfg)) => Some(influence_metrics(&all_w, &all_raw, fcfg)?),
        None => None,
    };
    let loss = -norm * total;
    if !loss.is_finite() {
        return Err(FipoError::Numeric {
            location: "token-level surrogate loss".into(),
        });
    }
    Ok(LossOutput {
        report: LossReport {
            loss,
            policy_clip_fraction: clipped as f64 / n_tokens as f64,
            low_clip_fraction: if negatives == 0 {
                0.0
            } else {
                floored as f64 / negatives as f64
            },
            policy_kl: batch_policy_kl(seqs),
            token_count: n_tokens,
            ratio_overflows: overflows,
            influence,
        },
        grad_lp,
    })
}

/// Adds the gradient path `lp_k → Δ_k → FutureKL_t (t ≤ k) → f_t → Ã_t`.
///
/// `∂loss/∂Δ_k = M_k Σ_{t≤k} γ^{k−t} w_t` with
/// `w_t = ∂loss/∂Ã_t · Â · ∂f_t/∂FutureKL_t`, accumulated left to right.
fn through_weight(g: &mut [f64], g_adv: &[f64], c: &CreditTensors, adv: f64, cfg: &FutureKlConfig) {
    let [lo, hi] = cfg.f_clip;
    let gamma = cfg.gamma();
    let mut acc = 0.0;
    for k in 0..g.len() {
        let raw = c.raw_weight[k];
        let df = if !c.reset[k] && raw > lo && raw < hi { raw } else { 0.0 };
        acc = gamma * acc + g_adv[k] * adv * df;
        if c.mask[k] {
            g[k] += acc;
        }
    }
}

/// Token-level clipped surrogate with the Future-KL reweighted advantage.
pub fn fipo_loss(
    seqs: &[SequenceInputs],
    credits: &[CreditTensors],
    clip: &ClipConfig,
    fkl: &FutureKlConfig,
) -> Result<LossOutput> {
    token_level_loss(seqs, Some((credits, fkl)), clip)
}

/// Token-level clipped surrogate with `f ≡ 1`.
pub fn dapo_loss(seqs: &[SequenceInputs], clip: &ClipConfig) -> Result<LossOutput> {
    token_level_loss(seqs, None, clip)
}

/// Sequence-mean-then-batch-mean clipped surrogate with an optional k3 KL
/// penalty towards a frozen reference policy. `ref_lp[i]` holds the
/// reference log-probs of response `i` and is required when `kl_beta > 0`.
pub fn grpo_loss(seqs: &[SequenceInputs], ref_lp: Option<&[Vec<f64>]>, clip: &ClipConfig) -> Result<LossOutput> {
    let n_tokens = check_batch(seqs)?;
    let use_kl = clip.kl_beta > 0.0;
    if use_kl {
        match ref_lp {
            Some(r) if r.len() == seqs.len() && r.iter().zip(seqs).all(|(r, q)| r.len() == q.current_lp.len()) => {}
            _ => {
                return Err(FipoError::Input(
                    "grpo with kl_beta > 0 needs reference log-probs for every response".into(),
                ))
            }
        }
    }
    let n_seq = seqs.len() as f64;
    let mut total = 0.0;
    let (mut clipped, mut overflows) = (0usize, 0usize);
    let mut grad_lp = Vec::with_capacity(seqs.len());
    for (i, q) in seqs.iter().enumerate() {
        let ratios = importance_ratio(q.current_lp, q.old_lp)?;
        overflows += ratios.overflows;
        let w = 1.0 / (n_seq * q.current_lp.len() as f64);
        let mut g = vec![0.0; q.current_lp.len()];
        for t in 0..q.current_lp.len() {
            let r = ratios.ratio[t];
            let term = token_term(r, q.advantage, clip, false);
            let mut value = term.value;
            match term.branch {
                Branch::Clipped => clipped += 1,
                _ => {
                    if (q.current_lp[t] - q.old_lp[t]).abs() <= MAX_LOG_RATIO {
                        g[t] = -w * q.advantage * r;
                    }
                }
            }
            if use_kl {
                let lr = ref_lp.unwrap()[i][t] - q.current_lp[t];
                value -= clip.kl_beta * (lr.exp() - lr - 1.0);
                g[t] += w * clip.kl_beta * (1.0 - lr.exp());
            }
            total += w * value;
        }
        grad_lp.push(g);
    }
    let loss = -total;
    if !loss.is_finite() {
        return Err(FipoError::Numeric {
            location: "grpo surrogate loss".into(),
        });
    }
    Ok(LossOutput {
        report: LossReport {
            loss,
            policy_clip_fraction: clipped as f64 / n_tokens as f64,
            low_clip_fraction: 0.0,
            policy_kl: batch_policy_kl(seqs),
            token_count: n_tokens,
            ratio_overflows: overflows,
            influence: None,
        },
        grad_lp,
    })
}
