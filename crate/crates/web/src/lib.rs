//! Browser bindings for exploring the Future-KL credit signal and the
//! clipped surrogate. The plain functions are usable (and tested) natively;
//! the `#[wasm_bindgen]` exports wrap them for JavaScript.

use fipo_core::future_kl::{
    future_kl_chunked, gamma_from_tau, influence_weight, stability_mask, FutureKlConfig,
};
use fipo_core::objective::{clipped_token_term, ClipConfig};
use wasm_bindgen::prelude::*;

/// `γ^d` for `d = 0..len`: how much a shift `d` tokens ahead counts.
pub fn decay(tau: f64, len: usize) -> Vec<f64> {
    let gamma = gamma_from_tau(tau);
    (0..len).map(|d| gamma.powi(d as i32)).collect()
}

/// Future-KL, influence weight and mask for a pattern of per-token shifts
/// `delta = log π − log π_old` under a scalar advantage.
#[derive(Clone, Debug, PartialEq)]
pub struct Credit {
    pub future_kl: Vec<f64>,
    pub weight: Vec<f64>,
    /// True where the safety mask drops the token.
    pub masked: Vec<bool>,
}

pub fn credit(
    delta: &[f64],
    tau: f64,
    safety_threshold: f64,
    f_clip: [f64; 2],
    advantage: f64,
) -> Result<Credit, String> {
    let cfg = FutureKlConfig {
        tau,
        safety_threshold,
        f_clip,
        ..FutureKlConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let old = vec![0.0; delta.len()];
    let mask = stability_mask(delta, &old, safety_threshold).map_err(|e| e.to_string())?;
    let fkl = future_kl_chunked(delta, &mask, cfg.gamma(), cfg.chunk_size).map_err(|e| e.to_string())?;
    let adv = vec![advantage; delta.len()];
    let ratio: Vec<f64> = delta.iter().map(|d| d.exp()).collect();
    let w = influence_weight(&fkl, &adv, &ratio, &cfg).map_err(|e| e.to_string())?;
    Ok(Credit {
        future_kl: fkl,
        weight: w.weight,
        masked: mask.iter().map(|m| !m).collect(),
    })
}

/// Per-token surrogate (with the dual-clip floor when `A < 0`) at `points`
/// ratios evenly spaced over `[r_min, r_max]`.
pub fn surrogate(
    advantage: f64,
    clip: &ClipConfig,
    r_min: f64,
    r_max: f64,
    points: usize,
) -> Result<Vec<f64>, String> {
    clip.validate().map_err(|e| e.to_string())?;
    if points < 2 || r_max <= r_min || r_min < 0.0 {
        return Err("need points ≥ 2 and 0 ≤ r_min < r_max".into());
    }
    let step = (r_max - r_min) / (points - 1) as f64;
    Ok((0..points)
        .map(|i| clipped_token_term(r_min + step * i as f64, advantage, clip))
        .collect())
}

#[wasm_bindgen]
pub fn decay_weights(tau: f64, len: usize) -> Vec<f64> {
    decay(tau, len)
}

/// Returns `[future_kl..., weight..., masked...]`, three blocks of
/// `delta.len()` values; `masked` is 1 where the safety mask drops a token.
#[wasm_bindgen]
pub fn credit_curve(
    delta: &[f64],
    tau: f64,
    safety_threshold: f64,
    f_low: f64,
    f_high: f64,
    advantage: f64,
) -> Result<Vec<f64>, JsError> {
    let c = credit(delta, tau, safety_threshold, [f_low, f_high], advantage).map_err(|e| JsError::new(&e))?;
    let mut out = c.future_kl;
    out.extend_from_slice(&c.weight);
    out.extend(c.masked.iter().map(|&m| if m { 1.0 } else { 0.0 }));
    Ok(out)
}

#[wasm_bindgen]
pub fn surrogate_curve(
    advantage: f64,
    eps_low: f64,
    eps_high: f64,
    dual_clip_c: f64,
    r_min: f64,
    r_max: f64,
    points: usize,
) -> Result<Vec<f64>, JsError> {
    let clip = ClipConfig {
        eps_low,
        eps_high,
        dual_clip_c,
        ..ClipConfig::default()
    };
    surrogate(advantage, &clip, r_min, r_max, points).map_err(|e| JsError::new(&e))
}
