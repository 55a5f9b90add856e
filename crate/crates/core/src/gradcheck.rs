//! Finite-difference audit of the analytic policy gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::group_advantage;
use crate::env::TaskFamily;
use crate::future_kl::{credit_tensors, CreditTensors, FutureKlConfig};
use crate::objective::{dapo_loss, fipo_loss, grpo_loss, ClipConfig, LossKind, LossOutput, SequenceInputs};
use crate::policy::{backward, sequence_forward, PolicyDims, PolicyParams, TokenCotangent, TokenId};
use crate::rollout::TaskSampler;
use crate::{FipoError, Result};

/// Central difference `(f(x+h) − f(x−h)) / 2h` along coordinate `i`.
pub fn central_difference(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], i: usize, h: f64) -> Result<f64> {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let up = f(&p)?;
    p[i] = x[i] - h;
    let down = f(&p)?;
    Ok((up - down) / (2.0 * h))
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub kind: LossKind,
    pub clip: ClipConfig,
    pub fipo: FutureKlConfig,
    pub dims: PolicyDims,
    pub groups: usize,
    pub group_size: usize,
    pub max_response_len: usize,
    /// Scale of the perturbation separating current from rollout parameters.
    pub drift: f64,
    pub coords: usize,
    pub step: f64,
    pub floor: f64,
    pub seed: u64,
}

impl AuditConfig {
    pub fn new(kind: LossKind) -> Self {
        AuditConfig {
            kind,
            clip: ClipConfig::default(),
            fipo: FutureKlConfig::default(),
            dims: PolicyDims {
                d_hidden: 32,
                ..PolicyDims::default()
            },
            groups: 3,
            group_size: 4,
            max_response_len: 12,
            drift: 0.15,
            coords: 120,
            step: 1e-5,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub index: usize,
    pub block: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub kind: LossKind,
    pub coords: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordinateCheck>,
    /// Share of tokens on the clipped branch, to show the audit exercised it.
    pub policy_clip_fraction: f64,
    pub checks: Vec<CoordinateCheck>,
}

struct Batch {
    items: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    old_lp: Vec<Vec<f64>>,
    ref_lp: Option<Vec<Vec<f64>>>,
    advantages: Vec<f64>,
}

fn perturbed<R: Rng>(base: &PolicyParams, scale: f64, rng: &mut R) -> Result<PolicyParams> {
    let v = base.values().iter().map(|x| x + scale * rng.gen_range(-1.0..1.0)).collect();
    PolicyParams::from_values(*base.dims(), v)
}

fn log_probs(params: &PolicyParams, items: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<Vec<Vec<f64>>> {
    items
        .iter()
        .map(|(p, o)| crate::policy::sequence_log_probs(params, p, o))
        .collect()
}

fn loss_at(
    cfg: &AuditConfig,
    batch: &Batch,
    current: &[Vec<f64>],
    frozen: Option<&[CreditTensors]>,
) -> Result<LossOutput> {
    let seqs: Vec<SequenceInputs> = current
        .iter()
        .zip(&batch.old_lp)
        .zip(&batch.advantages)
        .map(|((c, o), &a)| SequenceInputs {
            current_lp: c,
            old_lp: o,
            advantage: a,
        })
        .collect();
    match cfg.kind {
        LossKind::Dapo => dapo_loss(&seqs, &cfg.clip),
        LossKind::Grpo => grpo_loss(&seqs, batch.ref_lp.as_deref(), &cfg.clip),
        LossKind::Fipo => match frozen {
            Some(c) => fipo_loss(&seqs, c, &cfg.clip, &cfg.fipo),
            None => {
                let cur: Vec<&[f64]> = current.iter().map(Vec::as_slice).collect();
                let old: Vec<&[f64]> = batch.old_lp.iter().map(Vec::as_slice).collect();
                let credits = credit_tensors(&cur, &old, &batch.advantages, &cfg.fipo)?;
                fipo_loss(&seqs, &credits, &cfg.clip, &cfg.fipo)
            }
        },
    }
}

/// Coordinates spread evenly over the parameter blocks.
fn pick_coords<R: Rng>(dims: &PolicyDims, n: usize, rng: &mut R) -> Vec<usize> {
    let mut blocks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for i in 0..dims.num_params() {
        blocks.entry(dims.block_name(i)).or_default().push(i);
    }
    let per = n.div_ceil(blocks.len());
    let mut out = Vec::new();
    for members in blocks.values() {
        for _ in 0..per.min(members.len()) {
            out.push(members[rng.gen_range(0..members.len())]);
        }
    }
    out.sort_unstable();
    out.dedup();
    // top up after dedup
    while out.len() < n.min(dims.num_params()) {
        let i = rng.gen_range(0..dims.num_params());
        if let Err(pos) = out.binary_search(&i) {
            out.insert(pos, i);
        }
    }
    out
}

/// Compares the analytic loss gradient with central differences on a random
/// batch where the current policy has drifted from the rollout policy.
///
/// With a detached influence weight the Future-KL credit is frozen at the
/// evaluation point, matching what the analytic gradient differentiates.
pub fn audit_loss(cfg: &AuditConfig) -> Result<AuditReport> {
    if cfg.group_size < 2 || cfg.groups == 0 || cfg.coords == 0 {
        return Err(FipoError::Input("audit needs groups ≥ 1, group_size ≥ 2, coords ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let old = PolicyParams::init(cfg.dims, &mut rng);
    let params = perturbed(&old, cfg.drift, &mut rng)?;
    let reference = perturbed(&old, cfg.drift, &mut rng)?;

    let sampler = TaskSampler {
        family: TaskFamily::ModSum,
        difficulty_min: 1,
        difficulty_max: 3,
    };
    let mut items = Vec::new();
    let mut advantages = Vec::new();
    for _ in 0..cfg.groups {
        let task = sampler.sample(&mut rng)?;
        let rewards: Vec<f64> = loop {
            let r: Vec<f64> = (0..cfg.group_size).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if r.iter().any(|x| *x != r[0]) {
                break r;
            }
        };
        advantages.extend(group_advantage(&rewards)?);
        for _ in 0..cfg.group_size {
            let len = rng.gen_range(1..=cfg.max_response_len);
            let resp = (0..len)
                .map(|_| rng.gen_range(1..cfg.dims.vocab_size as TokenId))
                .collect();
            items.push((task.prompt.clone(), resp));
        }
    }
    let batch = Batch {
        old_lp: log_probs(&old, &items)?,
        ref_lp: (cfg.kind == LossKind::Grpo && cfg.clip.kl_beta > 0.0)
            .then(|| log_probs(&reference, &items))
            .transpose()?,
        items,
        advantages,
    };

    // analytic gradient
    let tapes = batch
        .items
        .iter()
        .map(|(p, o)| sequence_forward(&params, p, o))
        .collect::<Result<Vec<_>>>()?;
    let current: Vec<Vec<f64>> = tapes
        .iter()
        .zip(&batch.items)
        .map(|(ts, (_, o))| ts.iter().zip(o).map(|(f, &t)| f.log_probs()[t as usize]).collect())
        .collect();
    let frozen = if cfg.kind == LossKind::Fipo && cfg.fipo.detach_weight {
        let cur: Vec<&[f64]> = current.iter().map(Vec::as_slice).collect();
        let old: Vec<&[f64]> = batch.old_lp.iter().map(Vec::as_slice).collect();
        Some(credit_tensors(&cur, &old, &batch.advantages, &cfg.fipo)?)
    } else {
        None
    };
    let out = loss_at(cfg, &batch, &current, frozen.as_deref())?;
    let grad = backward(
        &params,
        tapes.iter().zip(&batch.items).zip(&out.grad_lp).flat_map(|((ts, (_, o)), g)| {
            ts.iter()
                .zip(o)
                .zip(g)
                .map(|((tape, &token), &weight)| TokenCotangent { tape, token, weight })
        }),
    )?;

    let f = |v: &[f64]| -> Result<f64> {
        let p = PolicyParams::from_values(cfg.dims, v.to_vec())?;
        let lp = log_probs(&p, &batch.items)?;
        Ok(loss_at(cfg, &batch, &lp, frozen.as_deref())?.report.loss)
    };
    let mut checks = Vec::new();
    for i in pick_coords(&cfg.dims, cfg.coords, &mut rng) {
        let numeric = central_difference(f, params.values(), i, cfg.step)?;
        let analytic = grad.values()[i];
        checks.push(CoordinateCheck {
            index: i,
            block: cfg.dims.block_name(i).to_string(),
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, cfg.floor),
        });
    }
    let worst = checks
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .cloned();
    Ok(AuditReport {
        kind: cfg.kind,
        coords: checks.len(),
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.rel_error),
        worst,
        policy_clip_fraction: out.report.policy_clip_fraction,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_a_cubic() {
        let f = |x: &[f64]| Ok(x[0].powi(3) + 2.0 * x[1]);
        let d = central_difference(f, &[2.0, 1.0], 0, 1e-4).unwrap();
        assert!((d - 12.0).abs() < 1e-7);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn coords_cover_every_block() {
        let dims = PolicyDims {
            d_hidden: 8,
            ..PolicyDims::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = pick_coords(&dims, 100, &mut rng);
        assert_eq!(c.len(), 100);
        let blocks: std::collections::BTreeSet<_> = c.iter().map(|&i| dims.block_name(i)).collect();
        assert_eq!(blocks.len(), 5);
    }

    #[test]
    fn small_audit_passes() {
        let mut cfg = AuditConfig::new(LossKind::Dapo);
        cfg.coords = 20;
        let r = audit_loss(&cfg).unwrap();
        assert!(r.max_rel_error < 1e-4, "{:?}", r.worst);
    }
}
