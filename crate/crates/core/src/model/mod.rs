//! Class-conditional decoder-only transformer over video tokens.
//!
//! Input sequence for a clip with tokens `x_0 … x_{S−1}` and class `c`:
//! `[cls(c), tok(x_0), …, tok(x_{S−1})]` plus learned absolute position
//! embeddings over the `S + 1` positions. The logit row at input position `j`
//! predicts `x_j`, so the class embedding predicts the first token and is
//! never a target itself. Blocks are pre-norm with GELU MLPs.

mod infer;
mod sampler;

pub use infer::KvCache;
pub use sampler::{sample_token, SamplerConfig};

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::sat::MaskPlan;
use crate::seed;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub num_classes: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Must be zero; kept so configs state it explicitly.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            num_classes: 3,
            seq_len: 256,
            dim: 128,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("vocab", self.vocab),
            ("num_classes", self.num_classes),
            ("seq_len", self.seq_len),
            ("dim", self.dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model field {name} must be positive")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model field dim = {} is not divisible by heads = {}",
                self.dim, self.heads
            )));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("model field dropout must be 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Learnable scalars in one transformer block.
    pub fn block_params(&self) -> usize {
        let (d, h) = (self.dim, self.hidden());
        2 * d // ln1
            + 4 * (d * d + d) // q, k, v, out
            + 2 * d // ln2
            + d * h + h // mlp in
            + h * d + d // mlp out
    }

    /// Exact number of learnable scalars.
    pub fn count_params(&self) -> usize {
        let (d, k) = (self.dim, self.vocab);
        k * d + self.num_classes * d + (self.seq_len + 1) * d
            + self.layers * self.block_params()
            + 2 * d
            + d * k
            + k
    }
}

pub const BLOCK_PARAMS: usize = 16;
const TOK: usize = 0;
const CLS: usize = 1;
const POS: usize = 2;
const FIRST_BLOCK: usize = 3;

/// Offsets of block parameters relative to the block's first index.
mod blk {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const BQ: usize = 3;
    pub const WK: usize = 4;
    pub const BK: usize = 5;
    pub const WV: usize = 6;
    pub const BV: usize = 7;
    pub const WO: usize = 8;
    pub const BO: usize = 9;
    pub const LN2_G: usize = 10;
    pub const LN2_B: usize = 11;
    pub const W1: usize = 12;
    pub const B1: usize = 13;
    pub const W2: usize = 14;
    pub const B2: usize = 15;
}

/// One training sequence.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub class_id: usize,
    pub tokens: &'a [usize],
    pub plan: Option<&'a MaskPlan>,
}

/// Result of a taped forward pass.
pub struct Forward {
    pub tape: Tape,
    pub loss: Var,
    /// `[B·S, K]` logits, item-major.
    pub logits: Var,
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Transformer {
    /// Canonical parameter names and shapes.
    pub fn param_shapes(c: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        c.validate()?;
        Ok(Self::shapes(c))
    }

    fn shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (c.dim, c.hidden());
        let mut v = vec![
            ("tok_emb".to_string(), vec![c.vocab, d]),
            ("cls_emb".to_string(), vec![c.num_classes, d]),
            ("pos_emb".to_string(), vec![c.seq_len + 1, d]),
        ];
        for l in 0..c.layers {
            let p = |s: &str| format!("block{l}.{s}");
            v.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp.w1"), vec![d, h]),
                (p("mlp.b1"), vec![h]),
                (p("mlp.w2"), vec![h, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        v.extend([
            ("lnf.g".to_string(), vec![d]),
            ("lnf.b".to_string(), vec![d]),
            ("head.w".to_string(), vec![d, c.vocab]),
            ("head.b".to_string(), vec![c.vocab]),
        ]);
        v
    }

    /// Random initialization: N(0, 0.02) embeddings and weights, residual
    /// output projections scaled by `1/√(2·layers)`, a near-zero output head,
    /// unit layer-norm gains and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.layers as f64).sqrt();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, dims) in Self::shapes(&config) {
            let n: usize = dims.iter().product();
            let sigma = if dims.len() == 1 {
                None
            } else if name == "head.w" {
                Some(1e-3)
            } else if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                Some(resid_std)
            } else {
                Some(std)
            };
            let data = match sigma {
                Some(s) => {
                    let dist = Normal::new(0.0, s).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                None if name.ends_with(".g") => vec![1.0; n],
                None => vec![0.0; n],
            };
            names.push(name);
            params.push(Tensor::new(dims, data)?.with_requires_grad(true));
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// Rebuilds a model from named tensors in canonical order.
    pub fn from_params(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::shapes(&config);
        if shapes.len() != named.len() {
            return Err(Error::Incompatible(format!(
                "model expects {} tensors, got {}",
                shapes.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut params = Vec::with_capacity(named.len());
        for ((want_name, want_dims), (name, t)) in shapes.into_iter().zip(named) {
            if want_name != name || want_dims != t.dims() {
                return Err(Error::Incompatible(format!(
                    "expected tensor {want_name} {want_dims:?}, found {name} {:?}",
                    t.dims()
                )));
            }
            names.push(name);
            params.push(t.with_requires_grad(true));
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Weight decay applies to matrices, not to gains and biases.
    pub fn decay_flags(&self) -> Vec<bool> {
        self.params.iter().map(|p| p.rank() == 2).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    fn block(&self, layer: usize, which: usize) -> usize {
        FIRST_BLOCK + layer * BLOCK_PARAMS + which
    }

    fn tail(&self) -> usize {
        FIRST_BLOCK + self.config.layers * BLOCK_PARAMS
    }

    /// Token embeddings (no tape), `S × d` row-major.
    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let (k, d) = (self.config.vocab, self.config.dim);
        let table = self.params[TOK].data();
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= k {
                return Err(Error::Index(format!("token id {t} >= vocab {k}")));
            }
            out.extend_from_slice(&table[t * d..(t + 1) * d]);
        }
        Ok(out)
    }

    fn check_item(&self, item: &TrainItem) -> Result<()> {
        let c = &self.config;
        if item.class_id >= c.num_classes {
            return Err(Error::Index(format!(
                "class {} >= num_classes {}",
                item.class_id, c.num_classes
            )));
        }
        if item.tokens.len() != c.seq_len {
            return Err(Error::Shape(format!(
                "sequence of {} tokens for a model with seq_len {}",
                item.tokens.len(),
                c.seq_len
            )));
        }
        if let Some(&bad) = item.tokens.iter().find(|&&t| t >= c.vocab) {
            return Err(Error::Index(format!("token id {bad} >= vocab {}", c.vocab)));
        }
        if let Some(plan) = item.plan {
            if plan.len() != c.seq_len {
                return Err(Error::Shape(format!(
                    "mask plan covers {} tokens, sequence has {}",
                    plan.len(),
                    c.seq_len
                )));
            }
        }
        Ok(())
    }

    /// Teacher-forced forward pass over a batch. The loss is the mean
    /// cross-entropy over all `B·S` video-token positions against the
    /// unmasked ids.
    pub fn forward(&self, items: &[TrainItem]) -> Result<Forward> {
        if items.is_empty() {
            return Err(Error::Shape("forward: empty batch".into()));
        }
        for item in items {
            self.check_item(item)?;
        }
        let c = &self.config;
        let (s, b) = (c.seq_len, items.len());
        let n = s + 1;
        let mut tape = Tape::new();
        let p: Vec<Var> = self.params.iter().map(|t| tape.leaf(t)).collect();

        let mut rows = Vec::with_capacity(b);
        for item in items {
            let cls = tape.embedding(p[CLS], &[item.class_id])?;
            let mut tok = tape.embedding(p[TOK], item.tokens)?;
            if let Some(plan) = item.plan {
                tok = tape.scale_rows(tok, plan.factors())?;
            }
            rows.push(tape.concat_rows(&[cls, tok])?);
        }
        let x = tape.concat_rows(&rows)?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let pos = tape.embedding(p[POS], &positions)?;
        let mut x = tape.add(x, pos)?;

        for l in 0..c.layers {
            let w = |i: usize| p[self.block(l, i)];
            let h = tape.layer_norm(x, w(blk::LN1_G), w(blk::LN1_B))?;
            let q = tape.linear(h, w(blk::WQ), w(blk::BQ))?;
            let k = tape.linear(h, w(blk::WK), w(blk::BK))?;
            let v = tape.linear(h, w(blk::WV), w(blk::BV))?;
            let a = tape.causal_attention(q, k, v, b, c.heads)?;
            let o = tape.linear(a, w(blk::WO), w(blk::BO))?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, w(blk::LN2_G), w(blk::LN2_B))?;
            let m = tape.linear(h, w(blk::W1), w(blk::B1))?;
            let m = tape.gelu(m);
            let m = tape.linear(m, w(blk::W2), w(blk::B2))?;
            x = tape.add(x, m)?;
        }
        let t = self.tail();
        let x = tape.layer_norm(x, p[t], p[t + 1])?;
        // Input positions 0..S predict tokens 0..S; the last input has no target.
        let keep: Vec<usize> = (0..b).flat_map(|i| (0..s).map(move |j| i * n + j)).collect();
        let x = tape.gather_rows(x, keep)?;
        let logits = tape.linear(x, p[t + 2], p[t + 3])?;
        let targets: Vec<usize> = items.iter().flat_map(|it| it.tokens.iter().copied()).collect();
        let loss = tape.cross_entropy(logits, &targets)?;
        Ok(Forward {
            tape,
            loss,
            logits,
            params: p,
        })
    }

    /// Single-sequence forward: `(logits [S, K], loss)`.
    pub fn forward_train(
        &self,
        class_id: usize,
        tokens: &[usize],
        plan: Option<&MaskPlan>,
    ) -> Result<(Tensor, f64)> {
        let f = self.forward(&[TrainItem {
            class_id,
            tokens,
            plan,
        }])?;
        Ok((f.tape.to_tensor(f.logits), f.tape.value(f.loss)[0]))
    }

    /// Mean loss over the batch; leaves gradients on every parameter.
    pub fn loss_and_grads(&mut self, items: &[TrainItem]) -> Result<f64> {
        let Forward {
            mut tape,
            loss,
            params,
            ..
        } = self.forward(items)?;
        let value = tape.value(loss)[0];
        let mut grads = tape.backward(loss)?;
        for (t, v) in self.params.iter_mut().zip(params) {
            let g = grads
                .take(v)
                .ok_or_else(|| Error::Contract("parameter missing from backward pass".into()))?;
            t.set_grad(g)?;
        }
        Ok(value)
    }

    /// Mean loss without gradients or masking.
    pub fn eval_loss(&self, items: &[(usize, &[usize])]) -> Result<f64> {
        let batch: Vec<TrainItem> = items
            .iter()
            .map(|&(class_id, tokens)| TrainItem {
                class_id,
                tokens,
                plan: None,
            })
            .collect();
        let f = self.forward(&batch)?;
        Ok(f.tape.value(f.loss)[0])
    }
}

/// Exact learnable-scalar count for `config`.
pub fn count_params(config: &ModelConfig) -> usize {
    config.count_params()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab: 8,
            num_classes: 3,
            seq_len: 6,
            dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            dropout: 0.0,
        }
    }

    #[test]
    fn count_matches_allocated_tensors() {
        for cfg in [tiny(), ModelConfig::default()] {
            let m = Transformer::init(cfg, 0).unwrap();
            assert_eq!(m.num_params(), cfg.count_params());
        }
    }

    #[test]
    fn config_validation_names_field() {
        let mut c = tiny();
        c.heads = 3;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("heads"), "{err}");
        c.heads = 2;
        c.dropout = 0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let m = Transformer::init(tiny(), 1).unwrap();
        assert!(matches!(m.forward_train(0, &[0, 1, 2, 3, 4, 8], None), Err(Error::Index(_))));
        assert!(matches!(m.forward_train(3, &[0; 6], None), Err(Error::Index(_))));
        let plan = MaskPlan::keep_all(4, 2);
        assert!(matches!(m.forward_train(0, &[0; 6], Some(&plan)), Err(Error::Shape(_))));
    }

    #[test]
    fn keep_all_plan_matches_no_plan_bitwise() {
        let m = Transformer::init(tiny(), 2).unwrap();
        let toks = [1, 5, 2, 7, 0, 3];
        let plan = MaskPlan::keep_all(6, 2);
        let (a, la) = m.forward_train(1, &toks, None).unwrap();
        let (b, lb) = m.forward_train(1, &toks, Some(&plan)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(la.to_bits(), lb.to_bits());
    }

    #[test]
    fn batch_loss_is_mean_of_items() {
        let m = Transformer::init(tiny(), 3).unwrap();
        let a = [1, 2, 3, 4, 5, 6];
        let b = [7, 6, 5, 4, 3, 2];
        let la = m.eval_loss(&[(0, &a)]).unwrap();
        let lb = m.eval_loss(&[(2, &b)]).unwrap();
        let lab = m.eval_loss(&[(0, &a), (2, &b)]).unwrap();
        assert!((lab - 0.5 * (la + lb)).abs() < 1e-12);
    }
}
