//! Group sampling under the frozen rollout policy and dynamic sampling.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::{group_advantage, mean_std};
use crate::env::{sample_task, shaped_reward, verify, RewardConfig, TaskFamily, TaskInstance, EOS};
use crate::policy::{context_window, sample_from_log_probs, PolicyParams, TokenId};
use crate::{FipoError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_response_len: usize,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_response_len: 32,
            temperature: 1.0,
            top_p: 1.0,
        }
    }
}

/// One sampled response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub response: Vec<TokenId>,
    /// `log π_old(o_t | ·)` from the forward pass that sampled `o_t`.
    pub old_log_probs: Vec<f64>,
    /// Entropy of the rollout distribution at each position.
    pub old_entropy: Vec<f64>,
    pub raw_reward: u8,
    pub shaped_reward: f64,
    /// Hit `max_response_len` without emitting EOS.
    pub truncated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }
}

/// Samples a response token by token until EOS or the length limit.
pub fn generate<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &[TokenId],
    gen: &GenerationConfig,
    rng: &mut R,
) -> Result<(Vec<TokenId>, Vec<f64>, Vec<f64>, bool)> {
    let window = params.dims().window;
    let mut response = Vec::with_capacity(gen.max_response_len);
    let mut lps = Vec::with_capacity(gen.max_response_len);
    let mut ents = Vec::with_capacity(gen.max_response_len);
    while response.len() < gen.max_response_len {
        let fwd = params.forward(&context_window(prompt, &response, window))?;
        let tok = sample_from_log_probs(fwd.log_probs(), gen.temperature, gen.top_p, rng);
        lps.push(fwd.log_probs()[tok as usize]);
        ents.push(fwd.entropy());
        response.push(tok);
        if tok == EOS {
            return Ok((response, lps, ents, false));
        }
    }
    Ok((response, lps, ents, true))
}

/// `G` responses to one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub task: TaskInstance,
    pub trajectories: Vec<Trajectory>,
    /// Mean / population std of the shaped rewards.
    pub reward_mean: f64,
    pub reward_std: f64,
    /// Per-trajectory `Â_i`; filled when the group is kept.
    pub advantages: Vec<f64>,
}

impl Group {
    pub fn raw_rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| f64::from(t.raw_reward)).collect()
    }

    pub fn shaped_rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.shaped_reward).collect()
    }

    /// All-correct or all-incorrect on the raw verifier reward.
    pub fn is_degenerate(&self) -> bool {
        let first = self.trajectories.first().map(|t| t.raw_reward);
        self.trajectories.iter().all(|t| Some(t.raw_reward) == first)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn build_group(
    old_params: &PolicyParams,
    task: TaskInstance,
    group_size: usize,
    gen: &GenerationConfig,
    reward: &RewardConfig,
    mut rng_for: impl FnMut(usize) -> ChaCha8Rng,
) -> Result<Group> {
    if group_size < 2 {
        return Err(FipoError::config("rollout.group_size", "must be at least 2"));
    }
    let mut trajectories = Vec::with_capacity(group_size);
    for i in 0..group_size {
        let mut rng = rng_for(i);
        let (response, old_log_probs, old_entropy, truncated) = generate(old_params, &task.prompt, gen, &mut rng)?;
        let raw_reward = verify(&task, &response);
        let shaped = shaped_reward(&task, &response, reward);
        trajectories.push(Trajectory {
            response,
            old_log_probs,
            old_entropy,
            raw_reward,
            shaped_reward: shaped,
            truncated,
        });
    }
    let (reward_mean, reward_std) = mean_std(&trajectories.iter().map(|t| t.shaped_reward).collect::<Vec<_>>());
    Ok(Group {
        task,
        trajectories,
        reward_mean,
        reward_std,
        advantages: Vec::new(),
    })
}

/// Samples `group_size` responses to `task`, each from its own stream
/// derived from `rng`.
pub fn rollout_group<R: Rng + ?Sized>(
    old_params: &PolicyParams,
    task: &TaskInstance,
    group_size: usize,
    gen: &GenerationConfig,
    reward: &RewardConfig,
    rng: &mut R,
) -> Result<Group> {
    let seed: u64 = rng.gen();
    build_group(old_params, task.clone(), group_size, gen, reward, |i| stream_rng(seed, i as u64))
}

/// Uniform difficulty sampling within a family.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSampler {
    pub family: TaskFamily,
    pub difficulty_min: u32,
    pub difficulty_max: u32,
}

impl TaskSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TaskInstance> {
        let d = rng.gen_range(self.difficulty_min..=self.difficulty_max);
        sample_task(self.family, d, rng)
    }
}

/// Lazily generated, seed-indexed stream of groups.
///
/// Group `j` draws its task and each response from ChaCha streams keyed by
/// `(seed, j)`, so its content does not depend on how many groups are
/// produced per wave or on thread scheduling. Waves are generated in
/// parallel when the `parallel` feature is on.
pub struct GroupStream<'a> {
    params: &'a PolicyParams,
    sampler: TaskSampler,
    group_size: usize,
    gen: GenerationConfig,
    reward: RewardConfig,
    seed: u64,
    wave: usize,
    next_index: u64,
    buffer: VecDeque<Result<Group>>,
}

impl<'a> GroupStream<'a> {
    pub fn new(
        params: &'a PolicyParams,
        sampler: TaskSampler,
        group_size: usize,
        gen: GenerationConfig,
        reward: RewardConfig,
        seed: u64,
        wave: usize,
    ) -> Self {
        GroupStream {
            params,
            sampler,
            group_size,
            gen,
            reward,
            seed,
            wave: wave.max(1),
            next_index: 0,
            buffer: VecDeque::new(),
        }
    }

    fn make(&self, j: u64) -> Result<Group> {
        let per_group = self.group_size as u64 + 1;
        let mut task_rng = stream_rng(self.seed, j * per_group);
        let task = self.sampler.sample(&mut task_rng)?;
        build_group(self.params, task, self.group_size, &self.gen, &self.reward, |i| {
            stream_rng(self.seed, j * per_group + 1 + i as u64)
        })
    }

    fn fill(&mut self) {
        let start = self.next_index;
        let end = start + self.wave as u64;
        #[cfg(feature = "parallel")]
        let groups: Vec<Result<Group>> = {
            use rayon::prelude::*;
            (start..end).into_par_iter().map(|j| self.make(j)).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let groups: Vec<Result<Group>> = (start..end).map(|j| self.make(j)).collect();
        self.buffer.extend(groups);
        self.next_index = end;
    }
}

impl Iterator for GroupStream<'_> {
    type Item = Result<Group>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.buffer.is_empty() {
            self.fill();
        }
        self.buffer.pop_front()
    }
}

/// Kept groups for one training iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainBatch {
    pub groups: Vec<Group>,
    /// Groups drawn from the stream to fill the batch.
    pub sampled_groups: usize,
}

impl TrainBatch {
    /// Sampled-to-kept ratio ("number of sampled batches").
    pub fn sampled_batches(&self) -> f64 {
        self.sampled_groups as f64 / self.groups.len().max(1) as f64
    }

    pub fn trajectories(&self) -> impl Iterator<Item = (&Group, &Trajectory, f64)> {
        self.groups
            .iter()
            .flat_map(|g| g.trajectories.iter().zip(&g.advantages).map(move |(t, &a)| (g, t, a)))
    }
}

/// Keeps groups with mixed raw rewards, in arrival order, until
/// `prompt_batch_size` are collected. Groups whose shaped rewards happen to
/// be constant are skipped as well since they carry no advantage signal.
pub fn dynamic_sample<I>(groups: I, prompt_batch_size: usize, resample_cap: usize) -> Result<TrainBatch>
where
    I: IntoIterator<Item = Result<Group>>,
{
    let mut stream = groups.into_iter();
    let mut kept = Vec::with_capacity(prompt_batch_size);
    let mut sampled = 0;
    while kept.len() < prompt_batch_size {
        if sampled >= resample_cap {
            return Err(FipoError::TrainingStall {
                sampled,
                kept: kept.len(),
                needed: prompt_batch_size,
                cap: resample_cap,
            });
        }
        let mut group = match stream.next() {
            Some(g) => g?,
            None => {
                return Err(FipoError::Input(format!(
                    "group stream ended after {sampled} groups with {} of {prompt_batch_size} kept",
                    kept.len()
                )))
            }
        };
        sampled += 1;
        if group.is_degenerate() {
            continue;
        }
        match group_advantage(&group.shaped_rewards()) {
            Ok(adv) => {
                group.advantages = adv;
                kept.push(group);
            }
            Err(FipoError::DegenerateGroup { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(TrainBatch {
        groups: kept,
        sampled_groups: sampled,
    })
}
