//! Sampled evaluation: mean@k, consensus@k and pass@k.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{extract_answer, verify, TaskInstance};
use crate::policy::{PolicyParams, TokenId};
use crate::rollout::{generate, GenerationConfig, TaskSampler};
use crate::{FipoError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub k: usize,
    pub instances: usize,
    /// Mean verifier score over all samples.
    pub mean_at_k: f64,
    /// Accuracy of the per-instance plurality answer; ties count as wrong.
    pub consensus_at_k: f64,
    /// Share of instances with at least one correct sample.
    pub pass_at_k: f64,
}

/// Scores `samples[i]` (k responses) against `instances[i]`.
pub fn score_samples(instances: &[TaskInstance], samples: &[Vec<Vec<TokenId>>]) -> Result<EvalMetrics> {
    if instances.is_empty() || instances.len() != samples.len() {
        return Err(FipoError::Input(format!(
            "need one sample set per instance ({} instances, {} sets)",
            instances.len(),
            samples.len()
        )));
    }
    let k = samples[0].len();
    if k == 0 || samples.iter().any(|s| s.len() != k) {
        return Err(FipoError::Input("every instance needs the same number (>= 1) of samples".into()));
    }
    let (mut correct, mut consensus, mut pass) = (0usize, 0usize, 0usize);
    for (inst, set) in instances.iter().zip(samples) {
        let hits = set.iter().filter(|r| verify(inst, r) == 1).count();
        correct += hits;
        if hits > 0 {
            pass += 1;
        }
        let mut votes: HashMap<&[TokenId], usize> = HashMap::new();
        for r in set {
            *votes.entry(extract_answer(inst, r)).or_default() += 1;
        }
        let top = votes.values().copied().max().unwrap_or(0);
        let leaders: Vec<&[TokenId]> = votes.iter().filter(|(_, &c)| c == top).map(|(a, _)| *a).collect();
        if leaders.len() == 1 && leaders[0] == inst.answer.as_slice() {
            consensus += 1;
        }
    }
    let n = instances.len() as f64;
    Ok(EvalMetrics {
        k,
        instances: instances.len(),
        mean_at_k: correct as f64 / (n * k as f64),
        consensus_at_k: consensus as f64 / n,
        pass_at_k: pass as f64 / n,
    })
}

/// Samples `n_instances` tasks and `n_samples` responses to each.
pub fn evaluate<R: Rng + ?Sized>(
    params: &PolicyParams,
    sampler: &TaskSampler,
    n_instances: usize,
    n_samples: usize,
    gen: &GenerationConfig,
    rng: &mut R,
) -> Result<EvalMetrics> {
    if n_samples == 0 {
        return Err(FipoError::Input("evaluation needs at least one sample per instance".into()));
    }
    let mut instances = Vec::with_capacity(n_instances);
    let mut samples = Vec::with_capacity(n_instances);
    for _ in 0..n_instances {
        let inst = sampler.sample(rng)?;
        let set = (0..n_samples)
            .map(|_| generate(params, &inst.prompt, gen, rng).map(|g| g.0))
            .collect::<Result<Vec<_>>>()?;
        instances.push(inst);
        samples.push(set);
    }
    score_samples(&instances, &samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{digit, TaskFamily, BOS, EOS, EQ, PLUS};
    use crate::policy::PolicyDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inst(a: u32, b: u32) -> TaskInstance {
        TaskInstance {
            family: TaskFamily::ModSum,
            difficulty: 1,
            prompt: vec![BOS, digit(a), PLUS, digit(b), EQ],
            answer: vec![digit((a + b) % 10)],
        }
    }

    /// Independent counter over a scripted pattern.
    fn scripted(pattern: &[&[u32]], insts: &[TaskInstance]) -> (f64, f64, f64) {
        let (mut c, mut cons, mut pass) = (0, 0, 0);
        for (p, t) in pattern.iter().zip(insts) {
            let ans = t.answer[0] - crate::env::DIGIT0;
            let hits = p.iter().filter(|&&d| d == ans).count();
            c += hits;
            pass += usize::from(hits > 0);
            let mut counts = [0usize; 10];
            for &d in p.iter() {
                counts[d as usize] += 1;
            }
            let top = *counts.iter().max().unwrap();
            let n_top = counts.iter().filter(|&&x| x == top).count();
            cons += usize::from(counts[ans as usize] == top && n_top == 1);
        }
        let n = insts.len() as f64;
        (c as f64 / (n * pattern[0].len() as f64), cons as f64 / n, pass as f64 / n)
    }

    #[test]
    fn stubbed_responses_match_counter() {
        let insts = vec![inst(1, 2), inst(4, 4), inst(9, 9), inst(0, 0)];
        // answers: 3, 8, 8, 0
        let pattern: Vec<&[u32]> = vec![&[3, 3, 1, 2], &[8, 1, 1, 8], &[1, 1, 1, 2], &[0, 5, 5, 5]];
        let samples: Vec<Vec<Vec<TokenId>>> = pattern
            .iter()
            .map(|p| p.iter().map(|&d| vec![digit(d), EOS]).collect())
            .collect();
        let m = score_samples(&insts, &samples).unwrap();
        let (mean, cons, pass) = scripted(&pattern, &insts);
        assert_eq!(m.mean_at_k, mean);
        assert_eq!(m.consensus_at_k, cons);
        assert_eq!(m.pass_at_k, pass);
        // hand check: 5 correct of 16; consensus only on instance 0; pass on 0, 1, 3
        assert_eq!((m.mean_at_k, m.consensus_at_k, m.pass_at_k), (5.0 / 16.0, 0.25, 0.75));
    }

    #[test]
    fn always_correct_policy_scores_one() {
        let insts = vec![inst(1, 1), inst(2, 5)];
        let samples: Vec<Vec<Vec<TokenId>>> = insts
            .iter()
            .map(|t| vec![[t.answer.clone(), vec![EOS]].concat(); 3])
            .collect();
        let m = score_samples(&insts, &samples).unwrap();
        assert_eq!((m.mean_at_k, m.consensus_at_k, m.pass_at_k), (1.0, 1.0, 1.0));
    }

    #[test]
    fn evaluate_runs_and_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = PolicyParams::init(PolicyDims::default(), &mut rng);
        let sampler = TaskSampler {
            family: TaskFamily::ModSum,
            difficulty_min: 1,
            difficulty_max: 1,
        };
        let m = evaluate(&params, &sampler, 20, 4, &GenerationConfig::default(), &mut rng).unwrap();
        assert_eq!((m.k, m.instances), (4, 20));
        for v in [m.mean_at_k, m.consensus_at_k, m.pass_at_k] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(m.pass_at_k >= m.mean_at_k);
        assert!(evaluate(&params, &sampler, 2, 0, &GenerationConfig::default(), &mut rng).is_err());
    }
}
