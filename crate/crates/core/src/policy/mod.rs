//! Tiny autoregressive softmax policy.
//!
//! The policy reads the last `window` tokens of the running sequence (prompt
//! followed by the response generated so far), left-padded with [`PAD`],
//! concatenates their embeddings and feeds them through one `tanh` hidden
//! layer to a logit per vocabulary entry:
//!
//! ```text
//! x      = [E[c_1]; ...; E[c_W]]
//! h      = tanh(W1 x + b1)
//! logits = W2 h + b2
//! log π  = logits - logsumexp(logits)
//! ```
//!
//! All parameters live in one flat `f64` vector so the optimizer, the
//! checkpoint format and the finite-difference audit can treat them
//! uniformly. Gradients are computed by hand-written reverse-mode passes over
//! a [`Forward`] tape.

mod optim;

pub use optim::{optimizer_step, OptimizerConfig, OptimizerState};

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{FipoError, Result};

pub type TokenId = u32;

/// Reserved padding id. Never sampled.
pub const PAD: TokenId = 0;

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    /// Tanh approximation of GELU.
    Gelu,
}

impl Activation {
    /// Returns `(a(x), a'(x))`.
    pub fn eval(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Gelu => {
                const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
                const K: f64 = 0.044_715;
                let t = (C * (x + K * x * x * x)).tanh();
                let value = 0.5 * x * (1.0 + t);
                let slope = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x);
                (value, slope)
            }
        }
    }
}

/// Architecture and initialisation of the policy network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDims {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub window: usize,
    pub d_hidden: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Multiplier on the fan-in scaled range of the hidden-layer weights.
    /// Large gains saturate the hidden units at initialisation, so distinct
    /// contexts start from nearly unrelated hidden codes.
    #[serde(default = "default_init_gain")]
    pub init_gain: f64,
}

fn default_init_gain() -> f64 {
    6.0
}

impl Default for PolicyDims {
    fn default() -> Self {
        PolicyDims {
            vocab_size: 16,
            d_emb: 8,
            window: 8,
            d_hidden: 128,
            activation: Activation::Tanh,
            init_gain: default_init_gain(),
        }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    emb: Range<usize>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
}

impl PolicyDims {
    pub fn input_dim(&self) -> usize {
        self.window * self.d_emb
    }

    pub fn num_params(&self) -> usize {
        self.layout().b2.end
    }

    fn layout(&self) -> Layout {
        let emb = 0..self.vocab_size * self.d_emb;
        let w1 = emb.end..emb.end + self.d_hidden * self.input_dim();
        let b1 = w1.end..w1.end + self.d_hidden;
        let w2 = b1.end..b1.end + self.vocab_size * self.d_hidden;
        let b2 = w2.end..w2.end + self.vocab_size;
        Layout { emb, w1, b1, w2, b2 }
    }

    /// Name of the parameter block holding flat index `i`, for error messages.
    pub fn block_name(&self, i: usize) -> &'static str {
        let l = self.layout();
        if l.emb.contains(&i) {
            "embedding"
        } else if l.w1.contains(&i) {
            "hidden.weight"
        } else if l.b1.contains(&i) {
            "hidden.bias"
        } else if l.w2.contains(&i) {
            "output.weight"
        } else {
            "output.bias"
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(FipoError::config("policy.vocab_size", "must be at least 2"));
        }
        for (key, v) in [
            ("policy.d_emb", self.d_emb),
            ("policy.window", self.window),
            ("policy.d_hidden", self.d_hidden),
        ] {
            if v == 0 {
                return Err(FipoError::config(key, "must be positive"));
            }
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return Err(FipoError::config("policy.init_gain", "must be finite and positive"));
        }
        Ok(())
    }
}

/// Parameter vector of the policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    dims: PolicyDims,
    values: Vec<f64>,
}

impl PolicyParams {
    /// All-zero parameters: every context maps to the uniform distribution.
    pub fn zeros(dims: PolicyDims) -> Self {
        PolicyParams {
            dims,
            values: vec![0.0; dims.num_params()],
        }
    }

    /// Uniform fan-in scaled initialisation. The output layer starts small so
    /// the initial policy is close to uniform.
    pub fn init<R: Rng + ?Sized>(dims: PolicyDims, rng: &mut R) -> Self {
        let mut p = Self::zeros(dims);
        let l = dims.layout();
        let fill = |vals: &mut [f64], scale: f64, rng: &mut R| {
            for v in vals {
                *v = rng.gen_range(-scale..scale);
            }
        };
        fill(&mut p.values[l.emb], 1.0, rng);
        fill(
            &mut p.values[l.w1],
            dims.init_gain * (3.0 / dims.input_dim() as f64).sqrt(),
            rng,
        );
        fill(&mut p.values[l.w2], 0.1 / (dims.d_hidden as f64).sqrt(), rng);
        p
    }

    pub fn from_values(dims: PolicyDims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.num_params() {
            return Err(FipoError::Input(format!(
                "parameter vector has {} entries, dims require {}",
                values.len(),
                dims.num_params()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FipoError::Numeric {
                location: format!("parameter {i} ({})", dims.block_name(i)),
            });
        }
        Ok(PolicyParams { dims, values })
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_token(&self, t: TokenId) -> Result<()> {
        if (t as usize) < self.dims.vocab_size {
            Ok(())
        } else {
            Err(FipoError::Input(format!(
                "token id {t} out of range for vocab size {}",
                self.dims.vocab_size
            )))
        }
    }

    /// Runs the network on one context window and keeps the activations for
    /// [`backward`].
    pub fn forward(&self, context: &[TokenId]) -> Result<Forward> {
        let d = &self.dims;
        if context.len() != d.window {
            return Err(FipoError::Input(format!(
                "context window has {} tokens, policy expects {}",
                context.len(),
                d.window
            )));
        }
        for &t in context {
            self.check_token(t)?;
        }
        let l = d.layout();
        let emb = &self.values[l.emb];
        let mut input = Vec::with_capacity(d.input_dim());
        for &t in context {
            let row = t as usize * d.d_emb;
            input.extend_from_slice(&emb[row..row + d.d_emb]);
        }

        let w1 = &self.values[l.w1];
        let b1 = &self.values[l.b1];
        let n_in = d.input_dim();
        let (hidden, hidden_slope): (Vec<f64>, Vec<f64>) = (0..d.d_hidden)
            .map(|j| {
                let row = &w1[j * n_in..(j + 1) * n_in];
                let s: f64 = row.iter().zip(&input).map(|(w, x)| w * x).sum();
                d.activation.eval(s + b1[j])
            })
            .unzip();

        let w2 = &self.values[l.w2];
        let b2 = &self.values[l.b2];
        let logits: Vec<f64> = (0..d.vocab_size)
            .map(|v| {
                let row = &w2[v * d.d_hidden..(v + 1) * d.d_hidden];
                row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + b2[v]
            })
            .collect();
        let log_probs = log_softmax(&logits);

        Ok(Forward {
            context: context.to_vec(),
            input,
            hidden,
            hidden_slope,
            log_probs,
        })
    }

    /// Next-token log-distribution for a right-aligned context window.
    pub fn token_log_probs(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.forward(context)?.log_probs)
    }
}

/// Activations of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    context: Vec<TokenId>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    hidden_slope: Vec<f64>,
    log_probs: Vec<f64>,
}

impl Forward {
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn context(&self) -> &[TokenId] {
        &self.context
    }

    /// Shannon entropy of the next-token distribution, in nats.
    pub fn entropy(&self) -> f64 {
        distribution_entropy(&self.log_probs)
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn distribution_entropy(log_probs: &[f64]) -> f64 {
    let h: f64 = log_probs
        .iter()
        .filter(|lp| lp.is_finite())
        .map(|&lp| -lp.exp() * lp)
        .sum();
    h.max(0.0)
}

/// Builds the context window preceding position `response_prefix.len()`:
/// the last `window` tokens of `prompt ++ response_prefix`, left-padded with
/// [`PAD`].
pub fn context_window(prompt: &[TokenId], response_prefix: &[TokenId], window: usize) -> Vec<TokenId> {
    let total = prompt.len() + response_prefix.len();
    let mut ctx = vec![PAD; window];
    for k in 0..window.min(total) {
        let pos = total - 1 - k;
        ctx[window - 1 - k] = if pos < prompt.len() {
            prompt[pos]
        } else {
            response_prefix[pos - prompt.len()]
        };
    }
    ctx
}

/// One forward tape per response position.
pub fn sequence_forward(params: &PolicyParams, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<Forward>> {
    if response.is_empty() {
        return Err(FipoError::Input("response must be non-empty".into()));
    }
    let w = params.dims.window;
    (0..response.len())
        .map(|t| {
            params.check_token(response[t])?;
            params.forward(&context_window(prompt, &response[..t], w))
        })
        .collect()
}

/// `log π(o_t | prompt, o_<t)` for every response position.
pub fn sequence_log_probs(params: &PolicyParams, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
    let tapes = sequence_forward(params, prompt, response)?;
    Ok(tapes
        .iter()
        .zip(response)
        .map(|(f, &o)| f.log_probs[o as usize])
        .collect())
}

/// Mean next-token entropy over a batch of context windows.
pub fn entropy(params: &PolicyParams, contexts: &[Vec<TokenId>]) -> Result<f64> {
    if contexts.is_empty() {
        return Err(FipoError::Input("entropy needs at least one context".into()));
    }
    let mut total = 0.0;
    for ctx in contexts {
        total += params.forward(ctx)?.entropy();
    }
    Ok(total / contexts.len() as f64)
}

/// Sampling distribution derived from next-token log-probs: temperature
/// scaled, PAD removed, nucleus-truncated and renormalised.
pub fn sampling_distribution(log_probs: &[f64], temperature: f64, top_p: f64) -> Vec<f64> {
    let scaled: Vec<f64> = log_probs
        .iter()
        .enumerate()
        .map(|(i, &lp)| {
            if i == PAD as usize {
                f64::NEG_INFINITY
            } else {
                lp / temperature
            }
        })
        .collect();
    let probs: Vec<f64> = log_softmax(&scaled).iter().map(|lp| lp.exp()).collect();
    nucleus(&probs, top_p)
}

/// Smallest highest-probability prefix whose mass reaches `top_p`,
/// renormalised. Ties are ordered by token id.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        if probs[i] <= 0.0 {
            break;
        }
        kept[i] = probs[i];
        mass += probs[i];
        if top_p < 1.0 && mass >= top_p {
            break;
        }
    }
    for p in &mut kept {
        *p /= mass;
    }
    kept
}

/// Draws an index from a (normalised) distribution by inverse CDF.
pub fn sample_from_probs<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

pub fn sample_from_log_probs<R: Rng + ?Sized>(log_probs: &[f64], temperature: f64, top_p: f64, rng: &mut R) -> TokenId {
    let dist = sampling_distribution(log_probs, temperature, top_p);
    sample_from_probs(&dist, rng) as TokenId
}

pub fn sample_token<R: Rng + ?Sized>(
    params: &PolicyParams,
    context: &[TokenId],
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> Result<TokenId> {
    if !(temperature > 0.0) {
        return Err(FipoError::Input(format!("temperature must be > 0, got {temperature}")));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(FipoError::Input(format!("top_p must lie in (0, 1], got {top_p}")));
    }
    let lp = params.token_log_probs(context)?;
    Ok(sample_from_log_probs(&lp, temperature, top_p, rng))
}

/// Gradient of a scalar w.r.t. every policy parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradVector {
    values: Vec<f64>,
    norm: f64,
}

impl GradVector {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|g| g * g).sum::<f64>().sqrt();
        GradVector { values, norm }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn scaled(&self, c: f64) -> GradVector {
        GradVector::new(self.values.iter().map(|g| g * c).collect())
    }
}

/// `∂loss/∂ log π(token | tape context)` for one position of the loss graph.
#[derive(Clone, Copy, Debug)]
pub struct TokenCotangent<'a> {
    pub tape: &'a Forward,
    pub token: TokenId,
    pub weight: f64,
}

/// Reverse-mode pass: accumulates `Σ weight · ∇θ log π(token | context)`.
///
/// Every surrogate loss in this crate is a sum of per-token functions of the
/// sampled token's log-prob, so its gradient is fully described by one
/// cotangent per token.
pub fn backward<'a, I>(params: &PolicyParams, items: I) -> Result<GradVector>
where
    I: IntoIterator<Item = TokenCotangent<'a>>,
{
    let d = &params.dims;
    let l = d.layout();
    let n_in = d.input_dim();
    let mut grad = vec![0.0; d.num_params()];
    let w1 = &params.values[l.w1.clone()];
    let w2 = &params.values[l.w2.clone()];
    let mut d_logits = vec![0.0; d.vocab_size];
    let mut d_pre = vec![0.0; d.d_hidden];

    for (idx, item) in items.into_iter().enumerate() {
        if !item.weight.is_finite() {
            return Err(FipoError::Numeric {
                location: format!("loss cotangent of graph item {idx}"),
            });
        }
        if item.weight == 0.0 {
            continue;
        }
        params.check_token(item.token)?;
        let tape = item.tape;
        for (v, dl) in d_logits.iter_mut().enumerate() {
            let onehot = if v == item.token as usize { 1.0 } else { 0.0 };
            *dl = item.weight * (onehot - tape.log_probs[v].exp());
        }

        // output layer
        for v in 0..d.vocab_size {
            let g = d_logits[v];
            grad[l.b2.start + v] += g;
            let row = l.w2.start + v * d.d_hidden;
            for (j, h) in tape.hidden.iter().enumerate() {
                grad[row + j] += g * h;
            }
        }

        // hidden layer
        for j in 0..d.d_hidden {
            let dh: f64 = (0..d.vocab_size).map(|v| w2[v * d.d_hidden + j] * d_logits[v]).sum();
            d_pre[j] = dh * tape.hidden_slope[j];
        }
        for (j, &g) in d_pre.iter().enumerate() {
            grad[l.b1.start + j] += g;
            let row = l.w1.start + j * n_in;
            for (i, x) in tape.input.iter().enumerate() {
                grad[row + i] += g * x;
            }
        }

        // embeddings
        for (slot, &tok) in tape.context.iter().enumerate() {
            let base = l.emb.start + tok as usize * d.d_emb;
            for e in 0..d.d_emb {
                let i = slot * d.d_emb + e;
                let dx: f64 = (0..d.d_hidden).map(|j| w1[j * n_in + i] * d_pre[j]).sum();
                grad[base + e] += dx;
            }
        }
    }

    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(FipoError::Numeric {
            location: format!("gradient entry {i} ({})", d.block_name(i)),
        });
    }
    Ok(GradVector::new(grad))
}
