//! Row-at-a-time inference. The cached and recompute paths share every
//! per-row kernel, so they agree bit for bit.

use super::{blk, SamplerConfig, Transformer, CLS, POS, TOK};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::kernels::row_matmul;
use crate::tensor::{gelu, layer_norm_row, softmax_in_place};

/// Per-layer keys and values of every position processed so far.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    capacity: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

struct Qkv {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

impl Transformer {
    pub fn new_cache(&self) -> KvCache {
        let c = &self.config;
        let cap = c.seq_len + 1;
        KvCache {
            keys: (0..c.layers).map(|_| Vec::with_capacity(cap * c.dim)).collect(),
            values: (0..c.layers).map(|_| Vec::with_capacity(cap * c.dim)).collect(),
            len: 0,
            capacity: cap,
        }
    }

    /// Embedding of input position `pos`: the class at 0, otherwise the
    /// previous token; position embedding included.
    fn input_row(&self, class_id: usize, prev: Option<usize>, pos: usize) -> Vec<f64> {
        let d = self.config.dim;
        let (table, row) = match prev {
            None => (CLS, class_id),
            Some(t) => (TOK, t),
        };
        let src = &self.params[table].data()[row * d..(row + 1) * d];
        let p = &self.params[POS].data()[pos * d..(pos + 1) * d];
        src.iter().zip(p).map(|(a, b)| a + b).collect()
    }

    fn qkv_row(&self, layer: usize, x: &[f64]) -> Qkv {
        let d = self.config.dim;
        let w = |i: usize| self.params[self.block(layer, i)].data();
        let mut h = vec![0.0; d];
        layer_norm_row(x, w(blk::LN1_G), w(blk::LN1_B), &mut h);
        let mut out = Qkv {
            q: vec![0.0; d],
            k: vec![0.0; d],
            v: vec![0.0; d],
        };
        row_matmul(&h, w(blk::WQ), d, Some(w(blk::BQ)), &mut out.q);
        row_matmul(&h, w(blk::WK), d, Some(w(blk::BK)), &mut out.k);
        row_matmul(&h, w(blk::WV), d, Some(w(blk::BV)), &mut out.v);
        out
    }

    /// Attention of one query over `keys`/`values` holding `n` rows each.
    fn attend_row(&self, q: &[f64], keys: &[f64], values: &[f64], out: &mut [f64]) {
        let c = &self.config;
        let (d, dh) = (c.dim, c.head_dim());
        let n = keys.len() / d;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut scores = vec![0.0; n];
        out.fill(0.0);
        for head in 0..c.heads {
            let lo = head * dh;
            let qh = &q[lo..lo + dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let kh = &keys[j * d + lo..j * d + lo + dh];
                *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(&mut scores);
            let oh = &mut out[lo..lo + dh];
            for (j, &p) in scores.iter().enumerate() {
                let vh = &values[j * d + lo..j * d + lo + dh];
                for (o, v) in oh.iter_mut().zip(vh) {
                    *o += p * v;
                }
            }
        }
    }

    /// Residual output projection and MLP, in place on `x`.
    fn finish_block(&self, layer: usize, x: &mut [f64], att: &[f64]) {
        let (d, hid) = (self.config.dim, self.config.hidden());
        let w = |i: usize| self.params[self.block(layer, i)].data();
        let mut o = vec![0.0; d];
        row_matmul(att, w(blk::WO), d, Some(w(blk::BO)), &mut o);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        let mut h = vec![0.0; d];
        layer_norm_row(x, w(blk::LN2_G), w(blk::LN2_B), &mut h);
        let mut m = vec![0.0; hid];
        row_matmul(&h, w(blk::W1), hid, Some(w(blk::B1)), &mut m);
        m.iter_mut().for_each(|v| *v = gelu(*v));
        row_matmul(&m, w(blk::W2), d, Some(w(blk::B2)), &mut o);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
    }

    fn head_row(&self, x: &[f64]) -> Vec<f64> {
        let (d, k) = (self.config.dim, self.config.vocab);
        let t = self.tail();
        let mut h = vec![0.0; d];
        layer_norm_row(x, self.params[t].data(), self.params[t + 1].data(), &mut h);
        let mut logits = vec![0.0; k];
        row_matmul(&h, self.params[t + 2].data(), k, Some(self.params[t + 3].data()), &mut logits);
        logits
    }

    fn check_class(&self, class_id: usize) -> Result<()> {
        if class_id >= self.config.num_classes {
            return Err(Error::Index(format!(
                "class {class_id} >= num_classes {}",
                self.config.num_classes
            )));
        }
        Ok(())
    }

    fn check_token(&self, t: usize) -> Result<()> {
        if t >= self.config.vocab {
            return Err(Error::Index(format!("token id {t} >= vocab {}", self.config.vocab)));
        }
        Ok(())
    }

    /// Feeds the next input (`None` = class prefix, else the previous token)
    /// and returns the logits for the token at the new position.
    pub fn step(&self, cache: &mut KvCache, class_id: usize, prev: Option<usize>) -> Result<Vec<f64>> {
        self.check_class(class_id)?;
        if let Some(t) = prev {
            self.check_token(t)?;
        }
        if (cache.len == 0) != prev.is_none() {
            return Err(Error::Contract(
                "the class prefix goes first and only first".into(),
            ));
        }
        if cache.len >= cache.capacity {
            return Err(Error::Shape(format!(
                "cache full at {} positions",
                cache.capacity
            )));
        }
        let mut x = self.input_row(class_id, prev, cache.len);
        let mut att = vec![0.0; self.config.dim];
        for l in 0..self.config.layers {
            let Qkv { q, k, v } = self.qkv_row(l, &x);
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            self.attend_row(&q, &cache.keys[l], &cache.values[l], &mut att);
            self.finish_block(l, &mut x, &att);
        }
        cache.len += 1;
        Ok(self.head_row(&x))
    }

    /// Logits for the token following `prefix`, recomputing every position
    /// layer by layer with no cache.
    pub fn next_logits_recompute(&self, class_id: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        self.check_class(class_id)?;
        for &t in prefix {
            self.check_token(t)?;
        }
        let n = prefix.len() + 1;
        if n > self.config.seq_len + 1 {
            return Err(Error::Shape(format!(
                "prefix of {} tokens exceeds seq_len {}",
                prefix.len(),
                self.config.seq_len
            )));
        }
        let d = self.config.dim;
        let mut xs: Vec<Vec<f64>> = (0..n)
            .map(|i| self.input_row(class_id, i.checked_sub(1).map(|j| prefix[j]), i))
            .collect();
        let mut att = vec![0.0; d];
        for l in 0..self.config.layers {
            let proj: Vec<Qkv> = xs.iter().map(|x| self.qkv_row(l, x)).collect();
            let keys: Vec<f64> = proj.iter().flat_map(|p| p.k.iter().copied()).collect();
            let values: Vec<f64> = proj.iter().flat_map(|p| p.v.iter().copied()).collect();
            for (i, x) in xs.iter_mut().enumerate() {
                let span = (i + 1) * d;
                self.attend_row(&proj[i].q, &keys[..span], &values[..span], &mut att);
                self.finish_block(l, x, &att);
            }
        }
        Ok(self.head_row(&xs[n - 1]))
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.seq_len {
            return Err(Error::Shape(format!(
                "requested {len} tokens, model seq_len is {}",
                self.config.seq_len
            )));
        }
        Ok(())
    }

    /// Samples `len` tokens for `class_id` with a KV cache.
    pub fn generate(&self, class_id: usize, len: usize, sampler: &SamplerConfig) -> Result<Vec<u32>> {
        self.check_class(class_id)?;
        self.check_len(len)?;
        sampler.validate(self.config.vocab)?;
        let mut rng = seed::rng(sampler.seed);
        let mut cache = self.new_cache();
        let mut out = Vec::with_capacity(len);
        let mut prev = None;
        for _ in 0..len {
            let logits = self.step(&mut cache, class_id, prev)?;
            let t = super::sample_token(&logits, sampler, &mut rng)?;
            out.push(t as u32);
            prev = Some(t);
        }
        Ok(out)
    }

    /// Same as [`generate`](Self::generate) but recomputes the full prefix
    /// at every step. Quadratic; meant for checking the cached path.
    pub fn generate_recompute(
        &self,
        class_id: usize,
        len: usize,
        sampler: &SamplerConfig,
    ) -> Result<Vec<u32>> {
        self.check_class(class_id)?;
        self.check_len(len)?;
        sampler.validate(self.config.vocab)?;
        let mut rng = seed::rng(sampler.seed);
        let mut prefix = Vec::with_capacity(len);
        for _ in 0..len {
            let logits = self.next_logits_recompute(class_id, &prefix)?;
            prefix.push(super::sample_token(&logits, sampler, &mut rng)?);
        }
        Ok(prefix.into_iter().map(|t| t as u32).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;

    fn model(seed: u64) -> Transformer {
        let cfg = ModelConfig {
            vocab: 10,
            num_classes: 2,
            seq_len: 12,
            dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            dropout: 0.0,
        };
        let mut m = Transformer::init(cfg, seed).unwrap();
        // Break the near-zero head so sampling is not close to uniform.
        let head = m.tail() + 2;
        for v in m.params_mut()[head].data_mut() {
            *v *= 300.0;
        }
        m
    }

    #[test]
    fn cached_matches_recompute_bitwise() {
        let m = model(5);
        for seed in 0..4 {
            let s = SamplerConfig::full(10, seed);
            assert_eq!(m.generate(1, 12, &s).unwrap(), m.generate_recompute(1, 12, &s).unwrap());
        }
    }

    #[test]
    fn step_logits_match_training_forward() {
        let m = model(6);
        let toks = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8];
        let (train, _) = m.forward_train(0, &toks, None).unwrap();
        let mut cache = m.new_cache();
        let mut prev = None;
        for (j, &t) in toks.iter().enumerate() {
            let row = m.step(&mut cache, 0, prev).unwrap();
            for (a, b) in row.iter().zip(&train.data()[j * 10..(j + 1) * 10]) {
                assert!((a - b).abs() < 1e-10);
            }
            prev = Some(t);
        }
    }

    #[test]
    fn generation_errors() {
        let m = model(1);
        let s = SamplerConfig::greedy();
        assert!(matches!(m.generate(2, 4, &s), Err(Error::Index(_))));
        assert!(matches!(m.generate(0, 13, &s), Err(Error::Shape(_))));
        let mut cache = m.new_cache();
        assert!(matches!(m.step(&mut cache, 0, Some(1)), Err(Error::Contract(_))));
    }

    #[test]
    fn greedy_is_seed_independent() {
        let m = model(2);
        let a = m.generate(0, 8, &SamplerConfig { seed: 1, ..SamplerConfig::greedy() }).unwrap();
        let b = m.generate(0, 8, &SamplerConfig { seed: 2, ..SamplerConfig::greedy() }).unwrap();
        assert_eq!(a, b);
    }
}
