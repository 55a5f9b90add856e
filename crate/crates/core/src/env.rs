//! Synthetic verifiable-reward tasks.
//!
//! Two families share one 16-token vocabulary:
//!
//! - `modsum`: `BOS a₁ + a₂ (+ …) =`, answer is the operand sum mod 10
//!   (difficulty `d` uses `d + 1` single-digit operands).
//! - `copy-reverse`: `BOS REV x₁ … xₙ =`, answer is the payload reversed
//!   (difficulty `n` is the payload length).
//!
//! A response is correct when, after stripping trailing PAD/EOS tokens, it
//! ends with the exact answer sequence. Anything before the answer is free
//! "reasoning" space.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::{TokenId, PAD};
use crate::{FipoError, Result};

pub const EOS: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EQ: TokenId = 3;
pub const PLUS: TokenId = 4;
pub const REV: TokenId = 5;
pub const DIGIT0: TokenId = 6;

/// Smallest vocabulary that holds every task token.
pub const TASK_VOCAB_SIZE: usize = DIGIT0 as usize + 10;

pub const MAX_PROMPT_LEN: usize = 12;

pub fn digit(d: u32) -> TokenId {
    DIGIT0 + d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskFamily {
    #[serde(rename = "modsum")]
    ModSum,
    #[serde(rename = "copy-reverse")]
    CopyReverse,
}

impl TaskFamily {
    pub fn difficulty_range(self) -> std::ops::RangeInclusive<u32> {
        match self {
            TaskFamily::ModSum => 1..=4,
            TaskFamily::CopyReverse => 1..=8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::ModSum => "modsum",
            TaskFamily::CopyReverse => "copy-reverse",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFamily {
    type Err = FipoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modsum" => Ok(TaskFamily::ModSum),
            "copy-reverse" => Ok(TaskFamily::CopyReverse),
            other => Err(FipoError::config(
                "env.family",
                format!("unknown task family `{other}` (expected modsum or copy-reverse)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub family: TaskFamily,
    pub difficulty: u32,
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

pub fn sample_task<R: Rng + ?Sized>(family: TaskFamily, difficulty: u32, rng: &mut R) -> Result<TaskInstance> {
    let range = family.difficulty_range();
    if !range.contains(&difficulty) {
        return Err(FipoError::config(
            "env.difficulty",
            format!(
                "difficulty {difficulty} outside {}..={} for {family}",
                range.start(),
                range.end()
            ),
        ));
    }
    let (prompt, answer) = match family {
        TaskFamily::ModSum => {
            let operands: Vec<u32> = (0..=difficulty).map(|_| rng.gen_range(0..10)).collect();
            let mut prompt = vec![BOS];
            for (i, &a) in operands.iter().enumerate() {
                if i > 0 {
                    prompt.push(PLUS);
                }
                prompt.push(digit(a));
            }
            prompt.push(EQ);
            let sum: u32 = operands.iter().sum();
            (prompt, vec![digit(sum % 10)])
        }
        TaskFamily::CopyReverse => {
            let payload: Vec<TokenId> = (0..difficulty).map(|_| digit(rng.gen_range(0..10))).collect();
            let mut prompt = vec![BOS, REV];
            prompt.extend_from_slice(&payload);
            prompt.push(EQ);
            (prompt, payload.into_iter().rev().collect())
        }
    };
    debug_assert!(prompt.len() <= MAX_PROMPT_LEN);
    Ok(TaskInstance {
        family,
        difficulty,
        prompt,
        answer,
    })
}

/// The response with trailing PAD/EOS removed.
pub fn strip_terminal(response: &[TokenId]) -> &[TokenId] {
    let end = response
        .iter()
        .rposition(|&t| t != PAD && t != EOS)
        .map_or(0, |i| i + 1);
    &response[..end]
}

/// Binary verifier: 1 iff the stripped response ends with the answer.
pub fn verify(instance: &TaskInstance, response: &[TokenId]) -> u8 {
    let body = strip_terminal(response);
    u8::from(!instance.answer.is_empty() && body.ends_with(&instance.answer))
}

/// The answer a response commits to: its last `|answer|` non-terminal tokens.
pub fn extract_answer<'a>(instance: &TaskInstance, response: &'a [TokenId]) -> &'a [TokenId] {
    let body = strip_terminal(response);
    &body[body.len().saturating_sub(instance.answer.len())..]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub max_response_len: usize,
    pub overlong_buffer: usize,
    pub penalty_scale: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            max_response_len: 32,
            overlong_buffer: 8,
            penalty_scale: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0 < self.overlong_buffer && self.overlong_buffer < self.max_response_len) {
            return Err(FipoError::config(
                "env.overlong_buffer",
                format!(
                    "need 0 < overlong_buffer ({}) < max_response_len ({})",
                    self.overlong_buffer, self.max_response_len
                ),
            ));
        }
        if !(self.penalty_scale >= 0.0) {
            return Err(FipoError::config("env.penalty_scale", "must be non-negative"));
        }
        Ok(())
    }

    /// Linear ramp from 0 at the buffer start to `-penalty_scale` at the
    /// hard limit.
    pub fn overlong_penalty(&self, len: usize) -> f64 {
        let start = self.max_response_len - self.overlong_buffer;
        if len <= start {
            0.0
        } else {
            -self.penalty_scale * (len - start) as f64 / self.overlong_buffer as f64
        }
    }
}

pub fn shaped_reward(instance: &TaskInstance, response: &[TokenId], cfg: &RewardConfig) -> f64 {
    f64::from(verify(instance, response)) + cfg.overlong_penalty(response.len())
}
