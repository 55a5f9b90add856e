//! Run configuration.
//!
//! One JSON document nested by subsystem. Unknown keys are rejected, every
//! key has a default, and [`RunConfig::set`] applies `section.key=value`
//! overrides with the same strictness.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::{RewardConfig, TaskFamily, TASK_VOCAB_SIZE};
use crate::future_kl::FutureKlConfig;
use crate::objective::{ClipConfig, LossKind};
use crate::policy::{OptimizerConfig, PolicyDims};
use crate::rollout::{GenerationConfig, TaskSampler};
use crate::{FipoError, Result, SCHEMA_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub family: TaskFamily,
    pub difficulty_min: u32,
    pub difficulty_max: u32,
    pub max_response_len: usize,
    pub overlong_buffer: usize,
    pub penalty_scale: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let r = RewardConfig::default();
        EnvConfig {
            family: TaskFamily::ModSum,
            difficulty_min: 1,
            difficulty_max: 1,
            max_response_len: r.max_response_len,
            overlong_buffer: r.overlong_buffer,
            penalty_scale: r.penalty_scale,
        }
    }
}

impl EnvConfig {
    pub fn reward(&self) -> RewardConfig {
        RewardConfig {
            max_response_len: self.max_response_len,
            overlong_buffer: self.overlong_buffer,
            penalty_scale: self.penalty_scale,
        }
    }

    pub fn sampler(&self) -> TaskSampler {
        TaskSampler {
            family: self.family,
            difficulty_min: self.difficulty_min,
            difficulty_max: self.difficulty_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub group_size: usize,
    pub prompt_batch_size: usize,
    /// Maximum groups drawn per iteration; `null` means 20 × prompt_batch_size.
    pub resample_cap: Option<usize>,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            group_size: 16,
            prompt_batch_size: 32,
            resample_cap: None,
            temperature: 1.0,
            top_p: 1.0,
        }
    }
}

impl RolloutConfig {
    pub fn cap(&self) -> usize {
        self.resample_cap.unwrap_or(20 * self.prompt_batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub eps_low: f64,
    pub eps_high: f64,
    pub dual_clip_c: f64,
    pub kl_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let c = ClipConfig::default();
        LossConfig {
            kind: LossKind::Fipo,
            eps_low: c.eps_low,
            eps_high: c.eps_high,
            dual_clip_c: c.dual_clip_c,
            kl_beta: c.kl_beta,
        }
    }
}

impl LossConfig {
    pub fn clip(&self) -> ClipConfig {
        ClipConfig {
            eps_low: self.eps_low,
            eps_high: self.eps_high,
            dual_clip_c: self.dual_clip_c,
            kl_beta: self.kl_beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub seed: u64,
    pub total_steps: u64,
    pub minibatch_prompts: usize,
    /// Evaluate every this many iterations (0: only after the last one).
    pub eval_every: u64,
    pub eval_instances: usize,
    pub eval_samples: usize,
    pub eval_temperature: f64,
    pub eval_top_p: f64,
    /// Stop once an evaluation reaches this mean@k accuracy.
    pub target_accuracy: Option<f64>,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
    /// Dump raw per-token tensors every this many iterations (0: never).
    pub dump_raw_every: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            seed: 0,
            total_steps: 300,
            minibatch_prompts: 8,
            eval_every: 10,
            eval_instances: 100,
            eval_samples: 16,
            eval_temperature: 1.0,
            eval_top_p: 0.7,
            target_accuracy: None,
            checkpoint_every: 0,
            dump_raw_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub policy: PolicyDims,
    pub optim: OptimizerConfig,
    pub env: EnvConfig,
    pub rollout: RolloutConfig,
    pub fipo: FutureKlConfig,
    pub loss: LossConfig,
    pub trainer: TrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            policy: PolicyDims::default(),
            optim: OptimizerConfig::default(),
            env: EnvConfig::default(),
            rollout: RolloutConfig::default(),
            fipo: FutureKlConfig::default(),
            loss: LossConfig::default(),
            trainer: TrainerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| FipoError::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FipoError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            max_response_len: self.env.max_response_len,
            temperature: self.rollout.temperature,
            top_p: self.rollout.top_p,
        }
    }

    pub fn eval_generation(&self) -> GenerationConfig {
        GenerationConfig {
            max_response_len: self.env.max_response_len,
            temperature: self.trainer.eval_temperature,
            top_p: self.trainer.eval_top_p,
        }
    }

    /// Applies a `section.key=value` override. The value is parsed as JSON
    /// and falls back to a plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply_overrides([(key, value)])
    }

    /// Applies several overrides and validates once at the end, so keys that
    /// constrain each other can be changed together in any order.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut next = self.clone();
        for (key, value) in pairs {
            next.set_unchecked(key, value)?;
        }
        next.validate()?;
        *self = next;
        Ok(())
    }

    fn set_unchecked(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| FipoError::config(key, "unknown config key"))?,
                _ => return Err(FipoError::config(key, "unknown config key")),
            };
        }
        if slot.is_object() {
            return Err(FipoError::config(key, "is a section, not a key"));
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        *self =
            serde_json::from_value(doc).map_err(|e| FipoError::config(key, format!("invalid value `{value}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(FipoError::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        self.policy.validate()?;
        if self.policy.vocab_size < TASK_VOCAB_SIZE {
            return Err(FipoError::config(
                "policy.vocab_size",
                format!("tasks need at least {TASK_VOCAB_SIZE} tokens"),
            ));
        }
        self.optim.validate()?;

        let range = self.env.family.difficulty_range();
        if !(range.contains(&self.env.difficulty_min)
            && range.contains(&self.env.difficulty_max)
            && self.env.difficulty_min <= self.env.difficulty_max)
        {
            return Err(FipoError::config(
                "env.difficulty_min",
                format!(
                    "difficulty range must satisfy {} <= min <= max <= {}",
                    range.start(),
                    range.end()
                ),
            ));
        }
        self.env.reward().validate()?;

        let r = &self.rollout;
        if r.group_size < 2 {
            return Err(FipoError::config("rollout.group_size", "must be at least 2"));
        }
        if r.prompt_batch_size == 0 {
            return Err(FipoError::config("rollout.prompt_batch_size", "must be positive"));
        }
        if r.cap() < r.prompt_batch_size {
            return Err(FipoError::config("rollout.resample_cap", "must be at least prompt_batch_size"));
        }
        if !(r.temperature > 0.0) {
            return Err(FipoError::config("rollout.temperature", "must be positive"));
        }
        if !(r.top_p > 0.0 && r.top_p <= 1.0) {
            return Err(FipoError::config("rollout.top_p", "must lie in (0, 1]"));
        }

        self.fipo.validate()?;
        self.loss.clip().validate()?;

        let t = &self.trainer;
        if t.minibatch_prompts == 0 || r.prompt_batch_size % t.minibatch_prompts != 0 {
            return Err(FipoError::config(
                "trainer.minibatch_prompts",
                format!("must divide rollout.prompt_batch_size ({})", r.prompt_batch_size),
            ));
        }
        if t.eval_instances == 0 || t.eval_samples == 0 {
            return Err(FipoError::config("trainer.eval_samples", "evaluation needs instances and samples"));
        }
        if !(t.eval_temperature > 0.0) {
            return Err(FipoError::config("trainer.eval_temperature", "must be positive"));
        }
        if !(t.eval_top_p > 0.0 && t.eval_top_p <= 1.0) {
            return Err(FipoError::config("trainer.eval_top_p", "must lie in (0, 1]"));
        }
        if let Some(a) = t.target_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(FipoError::config("trainer.target_accuracy", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}
