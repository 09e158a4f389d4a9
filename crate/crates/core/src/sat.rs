//! Semantic-aware token masking.
//!
//! The `S × C` input embeddings are cut into `S / H` contiguous segments of
//! `H` tokens. Each segment gets a variance `σ²_i` (per-channel biased variance
//! over its tokens, averaged over channels) and a masking ratio
//!
//! ```text
//! p_i = clamp((1 − σ²_i / max_j σ²_j) · p_max, 0, p_max)
//! ```
//!
//! so the most varied segment is never masked and flat, redundant segments are
//! masked most. Every token of segment `i` is then kept independently with
//! probability `1 − p_i`; dropped tokens have their embedding zeroed.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed;

/// Per-segment variances of an `S × C` row-major embedding matrix.
pub fn segment_variances(x: &[f64], channels: usize, h: usize) -> Result<Vec<f64>> {
    if channels == 0 || x.len() % channels != 0 {
        return Err(Error::Shape(format!(
            "{} values do not form rows of {channels} channels",
            x.len()
        )));
    }
    if h < 2 {
        return Err(Error::Domain(format!("segment length must be at least 2, got {h}")));
    }
    let s = x.len() / channels;
    if s % h != 0 {
        return Err(Error::Shape(format!(
            "sequence length {s} is not divisible by segment length {h}"
        )));
    }
    let mut out = Vec::with_capacity(s / h);
    let mut mean = vec![0.0; channels];
    for seg in x.chunks_exact(h * channels) {
        mean.fill(0.0);
        for tok in seg.chunks_exact(channels) {
            for (m, v) in mean.iter_mut().zip(tok) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= h as f64);
        let mut var = 0.0;
        for tok in seg.chunks_exact(channels) {
            for (m, v) in mean.iter().zip(tok) {
                var += (v - m) * (v - m);
            }
        }
        out.push(var / (h * channels) as f64);
    }
    Ok(out)
}

/// Masking ratio per segment. All-zero variances give all-zero ratios.
pub fn masking_ratios(variances: &[f64], p_max: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p_max) {
        return Err(Error::Domain(format!("p_max must lie in [0, 1), got {p_max}")));
    }
    let max = variances.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(vec![0.0; variances.len()]);
    }
    Ok(variances
        .iter()
        .map(|v| ((1.0 - v / max) * p_max).clamp(0.0, p_max))
        .collect())
}

/// Draws one keep flag per token (`Bernoulli(1 − p_i)` within segment `i`)
/// and returns the embeddings with dropped tokens zeroed. `x` is untouched.
pub fn apply_mask(x: &[f64], channels: usize, ratios: &[f64], seed: u64) -> Result<(Vec<f64>, Vec<bool>)> {
    if channels == 0 || x.len() % channels != 0 {
        return Err(Error::Shape(format!(
            "{} values do not form rows of {channels} channels",
            x.len()
        )));
    }
    let s = x.len() / channels;
    if ratios.is_empty() || s % ratios.len() != 0 {
        return Err(Error::Shape(format!(
            "{} ratios do not evenly cover {s} tokens",
            ratios.len()
        )));
    }
    let h = s / ratios.len();
    let mut rng = seed::rng(seed);
    let keep: Vec<bool> = (0..s)
        .map(|j| rng.random::<f64>() >= ratios[j / h])
        .collect();
    let mut out = x.to_vec();
    for (row, &k) in out.chunks_exact_mut(channels).zip(&keep) {
        if !k {
            row.fill(0.0);
        }
    }
    Ok((out, keep))
}

/// Everything SAT decided for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub h: usize,
    pub variances: Vec<f64>,
    pub ratios: Vec<f64>,
    /// One flag per token; `false` means the token's embedding is zeroed.
    pub keep: Vec<bool>,
    pub seed: u64,
}

impl MaskPlan {
    /// Computes variances, ratios and the sampled mask for `x` (`S × C`).
    pub fn build(x: &[f64], channels: usize, h: usize, p_max: f64, seed: u64) -> Result<Self> {
        let variances = segment_variances(x, channels, h)?;
        let ratios = masking_ratios(&variances, p_max)?;
        let (_, keep) = apply_mask(x, channels, &ratios, seed)?;
        Ok(Self {
            h,
            variances,
            ratios,
            keep,
            seed,
        })
    }

    /// Plan that keeps every token.
    pub fn keep_all(len: usize, h: usize) -> Self {
        let segs = if h == 0 { 0 } else { len / h };
        Self {
            h,
            variances: vec![0.0; segs],
            ratios: vec![0.0; segs],
            keep: vec![true; len],
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.keep.is_empty() {
            0.0
        } else {
            self.masked_count() as f64 / self.keep.len() as f64
        }
    }

    /// Row multipliers (1 keep, 0 drop).
    pub fn factors(&self) -> Vec<f64> {
        self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_tokens_have_zero_variance() {
        let x = [0.5, -1.0].repeat(8);
        assert_eq!(segment_variances(&x, 2, 8).unwrap(), vec![0.0]);
    }

    #[test]
    fn two_token_segment() {
        assert_eq!(segment_variances(&[0.0, 2.0], 1, 2).unwrap(), vec![1.0]);
    }

    #[test]
    fn variance_shape_and_domain_errors() {
        assert!(matches!(segment_variances(&[0.0; 6], 1, 4), Err(Error::Shape(_))));
        assert!(matches!(segment_variances(&[0.0; 4], 1, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn ratio_examples() {
        let r = masking_ratios(&[4.0, 2.0, 0.0], 0.3).unwrap();
        let want = [0.0, 0.15, 0.3];
        for (a, b) in r.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{r:?}");
        }
        assert_eq!(masking_ratios(&[4.0, 2.0, 0.0], 0.0).unwrap(), vec![0.0; 3]);
        assert_eq!(masking_ratios(&[3.0; 4], 0.3).unwrap(), vec![0.0; 4]);
        assert_eq!(masking_ratios(&[0.0; 4], 0.3).unwrap(), vec![0.0; 4]);
        assert!(matches!(masking_ratios(&[1.0], 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_ratios_are_identity() {
        let x: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
        let (y, keep) = apply_mask(&x, 4, &[0.0, 0.0], 11).unwrap();
        assert_eq!(y, x);
        assert!(keep.iter().all(|&k| k));
    }

    #[test]
    fn masked_rows_are_zero_and_others_untouched() {
        let x: Vec<f64> = (0..64).map(|i| i as f64 + 1.0).collect();
        let (y, keep) = apply_mask(&x, 2, &[0.9, 0.5], 5).unwrap();
        for (j, k) in keep.iter().enumerate() {
            let (a, b) = (&x[2 * j..2 * j + 2], &y[2 * j..2 * j + 2]);
            if *k {
                assert_eq!(a, b);
            } else {
                assert_eq!(b, &[0.0, 0.0]);
            }
        }
    }
}
