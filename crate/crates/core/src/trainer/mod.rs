//! The training iteration and the run loop around it.
//!
//! One iteration: snapshot the parameters as the rollout policy, fill a
//! batch by dynamic sampling, split the kept groups into mini-batches and
//! take one optimizer step per mini-batch. Every mini-batch recomputes the
//! current log-probs, so ratios (and for FIPO the Future-KL weights) are
//! measured against the same frozen rollout snapshot while the parameters
//! move.

mod eval;
mod metrics;

pub use eval::{evaluate, score_samples, EvalMetrics};
pub use metrics::{export_csv, read_metrics_jsonl, rows_to_csv, MetricsSink, StepMetrics, METRIC_KEYS};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::length_weighted_mean_advantage;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::future_kl::credit_tensors;
use crate::objective::{dapo_loss, fipo_loss, grpo_loss, LossKind, LossOutput, SequenceInputs};
use crate::policy::{
    backward, optimizer_step, sequence_forward, sequence_log_probs, Forward, OptimizerState, PolicyDims,
    PolicyParams, TokenCotangent, TokenId,
};
use crate::rollout::{dynamic_sample, GroupStream, TrainBatch};
use crate::stats::{mean, LengthStats};
use crate::{FipoError, Result, SCHEMA_VERSION};

/// Everything needed to continue training deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub params: PolicyParams,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
    /// Completed iterations.
    pub step: u64,
    /// Frozen reference policy for the GRPO KL penalty.
    pub ref_params: Option<PolicyParams>,
}

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed);
        let params = PolicyParams::init(config.policy, &mut rng);
        let ref_params = needs_reference(&config).then(|| params.clone());
        Ok(TrainState {
            optimizer: OptimizerState::new(params.len()),
            config,
            params,
            rng,
            step: 0,
            ref_params,
        })
    }
}

fn needs_reference(config: &RunConfig) -> bool {
    config.loss.kind == LossKind::Grpo && config.loss.kl_beta > 0.0
}

/// Per-token tensors of one iteration, for offline recomputation of the
/// logged diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDump {
    pub step: u64,
    pub dims: PolicyDims,
    /// Rollout-policy parameters.
    pub old_params: Vec<f64>,
    pub sequences: Vec<RawSequence>,
    pub minibatches: Vec<RawMinibatch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSequence {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub advantage: f64,
    pub old_lp: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawMinibatch {
    /// Indices into [`RawDump::sequences`].
    pub sequences: Vec<usize>,
    /// Current-policy log-probs at the mini-batch forward pass.
    pub current_lp: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub metrics: StepMetrics,
    pub raw: Option<RawDump>,
}

#[derive(Default)]
struct MinibatchTotals {
    n: usize,
    loss: f64,
    policy_kl: f64,
    grad_norm: f64,
    policy_clip: f64,
    low_clip: f64,
    influence_mean: f64,
    influence_clip: f64,
    overflows: u64,
}

fn evaluate_loss(
    state: &TrainState,
    seqs: &[SequenceInputs],
    current: &[Vec<f64>],
    olds: &[&[f64]],
    items: &[(&[TokenId], &[TokenId])],
) -> Result<LossOutput> {
    let cfg = &state.config;
    let clip = cfg.loss.clip();
    match cfg.loss.kind {
        LossKind::Dapo => dapo_loss(seqs, &clip),
        LossKind::Fipo => {
            let cur: Vec<&[f64]> = current.iter().map(Vec::as_slice).collect();
            let adv: Vec<f64> = seqs.iter().map(|s| s.advantage).collect();
            let credits = credit_tensors(&cur, olds, &adv, &cfg.fipo)?;
            fipo_loss(seqs, &credits, &clip, &cfg.fipo)
        }
        LossKind::Grpo => {
            let ref_lp = match (&state.ref_params, clip.kl_beta > 0.0) {
                (Some(r), true) => Some(
                    items
                        .iter()
                        .map(|(p, o)| sequence_log_probs(r, p, o))
                        .collect::<Result<Vec<_>>>()?,
                ),
                (None, true) => {
                    return Err(FipoError::Input("kl_beta > 0 but no reference policy in state".into()))
                }
                _ => None,
            };
            grpo_loss(seqs, ref_lp.as_deref(), &clip)
        }
    }
}

/// Runs one rollout → mini-batch update iteration and advances `state`.
pub fn train_step(state: &mut TrainState, dump_raw: bool) -> Result<StepOutcome> {
    let cfg = state.config.clone();
    let old = state.params.clone();
    let lr = cfg.optim.lr_at(state.step);

    let stream_seed = state.rng.next_u64();
    let stream = GroupStream::new(
        &old,
        cfg.env.sampler(),
        cfg.rollout.group_size,
        cfg.generation(),
        cfg.env.reward(),
        stream_seed,
        cfg.rollout.prompt_batch_size,
    );
    let mut sampled_correct = 0usize;
    let mut sampled_total = 0usize;
    let counted = stream.map(|g| {
        if let Ok(g) = &g {
            sampled_correct += g.trajectories.iter().filter(|t| t.raw_reward == 1).count();
            sampled_total += g.trajectories.len();
        }
        g
    });
    let batch: TrainBatch = dynamic_sample(counted, cfg.rollout.prompt_batch_size, cfg.rollout.cap())?;

    // batch-level diagnostics over kept trajectories
    let flat: Vec<_> = batch.trajectories().collect();
    let lengths: Vec<usize> = flat.iter().map(|(_, t, _)| t.len()).collect();
    let advs: Vec<f64> = flat.iter().map(|(_, _, a)| *a).collect();
    let len_stats = LengthStats::from_lengths(&lengths).expect("kept batch is non-empty");
    let lwma = length_weighted_mean_advantage(&advs, &lengths)?;
    let shaped: Vec<f64> = flat.iter().map(|(_, t, _)| t.shaped_reward).collect();
    let (ent_sum, ent_n) = flat
        .iter()
        .flat_map(|(_, t, _)| t.old_entropy.iter())
        .fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));

    let mut raw = dump_raw.then(|| RawDump {
        step: state.step,
        dims: *old.dims(),
        old_params: old.values().to_vec(),
        sequences: flat
            .iter()
            .map(|(g, t, a)| RawSequence {
                prompt: g.task.prompt.clone(),
                response: t.response.clone(),
                advantage: *a,
                old_lp: t.old_log_probs.clone(),
            })
            .collect(),
        minibatches: Vec::new(),
    });

    // mini-batch partition over groups, shuffled
    let mut order: Vec<usize> = (0..batch.groups.len()).collect();
    order.shuffle(&mut state.rng);
    let mut totals = MinibatchTotals::default();
    let g_size = cfg.rollout.group_size;

    for chunk in order.chunks(cfg.trainer.minibatch_prompts) {
        let seq_ids: Vec<usize> = chunk.iter().flat_map(|&gi| (gi * g_size)..(gi + 1) * g_size).collect();
        let items: Vec<(&[TokenId], &[TokenId])> = seq_ids
            .iter()
            .map(|&i| (flat[i].0.task.prompt.as_slice(), flat[i].1.response.as_slice()))
            .collect();
        let tapes: Vec<Vec<Forward>> = items
            .iter()
            .map(|(p, o)| sequence_forward(&state.params, p, o))
            .collect::<Result<_>>()?;
        let current: Vec<Vec<f64>> = tapes
            .iter()
            .zip(&items)
            .map(|(ts, (_, o))| ts.iter().zip(*o).map(|(f, &tok)| f.log_probs()[tok as usize]).collect())
            .collect();
        let olds: Vec<&[f64]> = seq_ids.iter().map(|&i| flat[i].1.old_log_probs.as_slice()).collect();
        let seqs: Vec<SequenceInputs> = seq_ids
            .iter()
            .enumerate()
            .map(|(k, &i)| SequenceInputs {
                current_lp: &current[k],
                old_lp: olds[k],
                advantage: flat[i].2,
            })
            .collect();

        let out = evaluate_loss(state, &seqs, &current, &olds, &items)?;
        let cotangents = tapes.iter().zip(&items).zip(&out.grad_lp).flat_map(|((ts, (_, o)), g)| {
            ts.iter()
                .zip(o.iter())
                .zip(g)
                .map(|((tape, &token), &weight)| TokenCotangent { tape, token, weight })
        });
        let grad = backward(&state.params, cotangents)?;
        optimizer_step(&mut state.params, &mut state.optimizer, &grad, &cfg.optim, lr)?;
        if !state.params.is_finite() {
            return Err(FipoError::Numeric {
                location: format!("parameters after update at step {}", state.step),
            });
        }

        let r = &out.report;
        totals.n += 1;
        totals.loss += r.loss;
        totals.policy_kl += r.policy_kl;
        totals.grad_norm += grad.norm();
        totals.policy_clip += r.policy_clip_fraction;
        totals.low_clip += r.low_clip_fraction;
        let infl = r.influence.unwrap_or(crate::future_kl::InfluenceMetrics {
            mean_weight: 1.0,
            clip_fraction: 0.0,
        });
        totals.influence_mean += infl.mean_weight;
        totals.influence_clip += infl.clip_fraction;
        totals.overflows += r.ratio_overflows as u64;

        if let Some(raw) = raw.as_mut() {
            raw.minibatches.push(RawMinibatch {
                sequences: seq_ids.clone(),
                current_lp: current.clone(),
            });
        }
    }

    let n = totals.n as f64;
    let metrics = StepMetrics {
        schema_version: SCHEMA_VERSION,
        step: state.step,
        loss: totals.loss / n,
        lr,
        reward_mean: mean(&shaped),
        reward_accuracy: sampled_correct as f64 / sampled_total.max(1) as f64,
        length_min: len_stats.min,
        length_q25: len_stats.q25,
        length_median: len_stats.median,
        length_mean: len_stats.mean,
        length_q75: len_stats.q75,
        length_max: len_stats.max,
        policy_kl: totals.policy_kl / n,
        entropy: ent_sum / ent_n.max(1) as f64,
        grad_norm: totals.grad_norm / n,
        policy_clip_fraction: totals.policy_clip / n,
        low_clip_fraction: totals.low_clip / n,
        influence_mean_weight: totals.influence_mean / n,
        influence_clip_fraction: totals.influence_clip / n,
        length_weighted_mean_advantage: lwma,
        sampled_batches: batch.sampled_batches(),
        ratio_overflows: totals.overflows,
        eval_mean_at_k: None,
        eval_consensus_at_k: None,
        eval_pass_at_k: None,
    };
    state.step += 1;
    Ok(StepOutcome { metrics, raw })
}

/// Evaluation with the run's fixed evaluation stream, so every evaluation
/// of a run sees the same instances.
pub fn evaluate_state(params: &PolicyParams, config: &RunConfig) -> Result<EvalMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed ^ 0x5eed_e7a1_0000_0001);
    evaluate(
        params,
        &config.env.sampler(),
        config.trainer.eval_instances,
        config.trainer.eval_samples,
        &config.eval_generation(),
        &mut rng,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub loss_kind: LossKind,
    pub steps_run: u64,
    pub stopped_early: bool,
    pub final_eval: Option<EvalMetrics>,
    pub peak_eval: Option<EvalMetrics>,
    pub peak_step: Option<u64>,
    /// Means over all iterations of this run.
    pub mean_response_length: f64,
    pub mean_entropy: f64,
    pub wall_seconds: f64,
}

/// Output layout of a training run.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths { dir: dir.to_path_buf() }
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }
    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join("checkpoints").join(format!("step_{step:06}.json"))
    }
    pub fn raw_dump(&self, step: u64) -> PathBuf {
        self.dir.join("raw").join(format!("step_{step:06}.json"))
    }
    pub fn crash_state(&self) -> PathBuf {
        self.dir.join("crash_state.json")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| FipoError::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| FipoError::io(path, e))
}

/// Trains from `state` until `trainer.total_steps` iterations are complete
/// (or the target accuracy is reached), writing metrics, checkpoints and a
/// summary under `out_dir`. `on_step` sees each record as it is written.
pub fn run_training(
    mut state: TrainState,
    out_dir: &Path,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<(TrainState, RunSummary)> {
    let start = std::time::Instant::now();
    let paths = RunPaths::new(out_dir);
    std::fs::create_dir_all(out_dir).map_err(|e| FipoError::io(out_dir, e))?;
    write_json(&paths.config(), &state.config)?;
    let mut sink = if state.step == 0 {
        MetricsSink::create(&paths.metrics())?
    } else {
        MetricsSink::append(&paths.metrics())?
    };

    let tc = state.config.trainer.clone();
    let mut peak: Option<(u64, EvalMetrics)> = None;
    let mut last_eval = None;
    let mut lengths = Vec::new();
    let mut entropies = Vec::new();
    let mut stopped_early = false;

    while state.step < tc.total_steps {
        let step = state.step;
        let dump = tc.dump_raw_every > 0 && step % tc.dump_raw_every == 0;
        let mut outcome = match train_step(&mut state, dump) {
            Ok(o) => o,
            Err(e @ FipoError::Numeric { .. }) => {
                checkpoint::save(&state, &paths.crash_state())?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let last = state.step == tc.total_steps;
        let due = (tc.eval_every > 0 && state.step % tc.eval_every == 0) || last;
        if due {
            let ev = evaluate_state(&state.params, &state.config)?;
            outcome.metrics.eval_mean_at_k = Some(ev.mean_at_k);
            outcome.metrics.eval_consensus_at_k = Some(ev.consensus_at_k);
            outcome.metrics.eval_pass_at_k = Some(ev.pass_at_k);
            if peak.map_or(true, |(_, p)| ev.mean_at_k > p.mean_at_k) {
                peak = Some((step, ev));
            }
            last_eval = Some(ev);
            if tc.target_accuracy.is_some_and(|t| ev.mean_at_k >= t) {
                stopped_early = !last;
            }
        }
        lengths.push(outcome.metrics.length_mean);
        entropies.push(outcome.metrics.entropy);
        sink.write(&outcome.metrics)?;
        if let Some(raw) = &outcome.raw {
            write_json(&paths.raw_dump(step), raw)?;
        }
        on_step(&outcome.metrics);
        if tc.checkpoint_every > 0 && state.step % tc.checkpoint_every == 0 {
            checkpoint::save(&state, &paths.checkpoint(state.step))?;
        }
        if stopped_early {
            break;
        }
    }
    drop(sink);
    checkpoint::save(&state, &paths.checkpoint(state.step))?;
    export_csv(&paths.metrics(), &paths.metrics_csv())?;

    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        loss_kind: state.config.loss.kind,
        steps_run: state.step,
        stopped_early,
        final_eval: last_eval,
        peak_eval: peak.map(|p| p.1),
        peak_step: peak.map(|p| p.0),
        mean_response_length: mean(&lengths),
        mean_entropy: mean(&entropies),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&paths.summary(), &summary)?;
    Ok((state, summary))
}
