use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tensor::softmax_in_place;

/// Token sampling settings. `temperature < 1e-6` or `top_k == 1` is greedy;
/// `top_k` must lie in `1..=K`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl SamplerConfig {
    /// Plain softmax sampling over all `vocab` ids.
    pub fn full(vocab: usize, seed: u64) -> Self {
        Self {
            temperature: 1.0,
            top_k: vocab,
            seed,
        }
    }

    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            top_k: 1,
            seed: 0,
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature < 1e-6 || self.top_k == 1
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "sampler temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        if self.top_k == 0 || self.top_k > vocab {
            return Err(Error::Config(format!(
                "sampler top_k must lie in 1..={vocab}, got {}",
                self.top_k
            )));
        }
        Ok(())
    }
}

fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Draws one id from `logits`. Ties in greedy mode go to the lowest id.
pub fn sample_token(logits: &[f64], config: &SamplerConfig, rng: &mut Rng) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Shape("sample_token: empty logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sample_token: non-finite logit".into()));
    }
    config.validate(logits.len())?;
    if config.is_greedy() {
        return Ok(argmax(logits));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    if config.top_k < logits.len() {
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(config.top_k);
    }
    let mut probs: Vec<f64> = order.iter().map(|&i| logits[i] / config.temperature).collect();
    softmax_in_place(&mut probs);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (&id, p) in order.iter().zip(&probs) {
        acc += p;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(*order.last().expect("non-empty"))
}
