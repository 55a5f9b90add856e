//! Group-relative advantages.

use crate::{FipoError, Result};

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `Â_i = (R_i − μ) / σ` with the population standard deviation.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(FipoError::Input(format!(
            "group advantage needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let (mean, std) = mean_std(rewards);
    if !(std > 0.0) {
        return Err(FipoError::DegenerateGroup { mean });
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `Σ_i Σ_t Â_{i,t} / Σ_i L_i` where the token advantage is the scalar
/// `Â_i` broadcast over the `L_i` tokens of response `i`.
pub fn length_weighted_mean_advantage(advantages: &[f64], lengths: &[usize]) -> Result<f64> {
    if advantages.is_empty() || advantages.len() != lengths.len() {
        return Err(FipoError::Input(format!(
            "need matching non-empty advantages ({}) and lengths ({})",
            advantages.len(),
            lengths.len()
        )));
    }
    let tokens: usize = lengths.iter().sum();
    if tokens == 0 {
        return Err(FipoError::Input("batch has no tokens".into()));
    }
    let total: f64 = advantages
        .iter()
        .zip(lengths)
        .map(|(a, &l)| a * l as f64)
        .sum();
    Ok(total / tokens as f64)
}
