//! Checkpoint file.
//!
//! ```text
//! "CKPT" u16 version u32 config_hash u64 step u32 tensor_count
//! per tensor: u16 name_len, name (UTF-8), u8 rank, u32 dims[rank], f64 data
//! ```
//!
//! Tensors, in order: `meta.*` (configuration), model parameters,
//! `adamw.m.<name>` / `adamw.v.<name>`, `rng.state` and `codebook`.
//! The header hash is FNV-1a over the canonical configuration text and is
//! recomputed from the `meta.*` tensors on load.

use std::path::Path;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::formats::{write_file, Reader};
use crate::model::ModelConfig;
use crate::sgp::{TokenLayout, TokenOrder};
use crate::tensor::Tensor;
use crate::vq::CodeBook;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub layout: TokenLayout,
    pub order: TokenOrder,
    pub codebook: CodeBook,
    /// Model parameters in canonical order.
    pub params: Vec<(String, Tensor)>,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

/// 32-bit FNV-1a.
pub fn fnv1a32(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

/// Text identifying everything that must match for a resume to be valid.
/// Step budget, logging cadence and reference mode are excluded.
pub fn canonical_config(config: &TrainConfig, layout: &TokenLayout, order: TokenOrder, codebook: &CodeBook) -> String {
    let m = &config.model;
    format!(
        "vocab={} num_classes={} seq_len={} dim={} layers={} heads={} mlp_ratio={} dropout={:?}\n\
         lr={:?} beta1={:?} beta2={:?} eps={:?} weight_decay={:?} batch_size={} p_max={:?} segment_len={} seed={}\n\
         frames={} grid={}x{} frame_tokens={}x{} order={}\n\
         codebook={}x{}x{}x{}\n",
        m.vocab,
        m.num_classes,
        m.seq_len,
        m.dim,
        m.layers,
        m.heads,
        m.mlp_ratio,
        m.dropout,
        config.optimizer.lr,
        config.optimizer.beta1,
        config.optimizer.beta2,
        config.optimizer.eps,
        config.optimizer.weight_decay,
        config.batch_size,
        config.p_max,
        config.segment_len,
        config.seed,
        layout.frames,
        layout.grid_rows,
        layout.grid_cols,
        layout.frame_tok_rows,
        layout.frame_tok_cols,
        order.name(),
        codebook.size(),
        codebook.patch_h(),
        codebook.patch_w(),
        codebook.channels(),
    )
}

impl Checkpoint {
    pub fn config_hash(&self) -> u32 {
        fnv1a32(canonical_config(&self.config, &self.layout, self.order, &self.codebook).as_bytes())
    }

    fn tensors(&self) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
        let c = &self.config;
        let m = &c.model;
        let split = |v: u64| [(v & 0xffff_ffff) as f64, (v >> 32) as f64];
        let mut out = vec![
            (
                "meta.model".to_string(),
                vec![8],
                vec![
                    m.vocab as f64,
                    m.num_classes as f64,
                    m.seq_len as f64,
                    m.dim as f64,
                    m.layers as f64,
                    m.heads as f64,
                    m.mlp_ratio as f64,
                    m.dropout,
                ],
            ),
            (
                "meta.train".to_string(),
                vec![14],
                [
                    c.optimizer.lr,
                    c.optimizer.beta1,
                    c.optimizer.beta2,
                    c.optimizer.eps,
                    c.optimizer.weight_decay,
                    c.batch_size as f64,
                    c.p_max,
                    c.segment_len as f64,
                ]
                .into_iter()
                .chain(split(c.seed))
                .chain([
                    c.steps as f64,
                    c.eval_every as f64,
                    c.checkpoint_every as f64,
                    if c.reference { 1.0 } else { 0.0 },
                ])
                .collect(),
            ),
            (
                "meta.layout".to_string(),
                vec![6],
                vec![
                    self.layout.frames as f64,
                    self.layout.grid_rows as f64,
                    self.layout.grid_cols as f64,
                    self.layout.frame_tok_rows as f64,
                    self.layout.frame_tok_cols as f64,
                    match self.order {
                        TokenOrder::GridRaster => 0.0,
                        TokenOrder::FrameMajor => 1.0,
                    },
                ],
            ),
        ];
        for (name, t) in &self.params {
            out.push((name.clone(), t.dims().to_vec(), t.data().to_vec()));
        }
        if self.adam_m.len() != self.params.len() || self.adam_v.len() != self.params.len() {
            return Err(Error::Shape("optimizer state does not match parameter count".into()));
        }
        for (prefix, moments) in [("adamw.m.", &self.adam_m), ("adamw.v.", &self.adam_v)] {
            for ((name, t), buf) in self.params.iter().zip(moments) {
                if buf.len() != t.numel() {
                    return Err(Error::Shape(format!("optimizer buffer for {name} has wrong length")));
                }
                out.push((format!("{prefix}{name}"), t.dims().to_vec(), buf.clone()));
            }
        }
        let seed = split(c.seed);
        out.push(("rng.state".to_string(), vec![3], vec![seed[0], seed[1], self.step as f64]));
        let cb = &self.codebook;
        out.push((
            "meta.codebook".to_string(),
            vec![3],
            vec![cb.patch_h() as f64, cb.patch_w() as f64, cb.channels() as f64],
        ));
        out.push((
            "codebook".to_string(),
            vec![cb.size(), cb.patch_len()],
            cb.codewords().to_vec(),
        ));
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors()?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash().to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, dims, data) in tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Shape(format!("tensor name {name} too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dims.len() as u8);
            for d in &dims {
                let d = u32::try_from(*d)
                    .map_err(|_| Error::Shape(format!("tensor {name} extent {d} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "{}: checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}",
                path.display()
            )));
        }
        let hash = r.u32()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.offset();
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.bytes(len)?)
                .map_err(|_| r.err(format!("tensor name at offset {at} is not UTF-8")))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.err(format!("tensor {name} size overflows")))?;
            let data = r.f64s(n)?;
            tensors.push((name, dims, data));
        }
        r.finish()?;
        let ckpt = assemble(tensors, step, path)?;
        let want = ckpt.config_hash();
        if want != hash {
            return Err(Error::Incompatible(format!(
                "{}: header config hash {hash:#010x} does not match stored configuration {want:#010x}",
                path.display()
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn as_count(v: f64, what: &str, path: &Path) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
        Ok(v as usize)
    } else {
        Err(Error::format(path, format!("{what} = {v} is not a count")))
    }
}

fn assemble(tensors: Vec<(String, Vec<usize>, Vec<f64>)>, step: u64, path: &Path) -> Result<Checkpoint> {
    let mut it = tensors.into_iter();
    let mut next = |want: &str, len: Option<usize>| -> Result<(Vec<usize>, Vec<f64>)> {
        let (name, dims, data) = it
            .next()
            .ok_or_else(|| Error::format(path, format!("missing tensor {want}")))?;
        if name != want {
            return Err(Error::format(path, format!("expected tensor {want}, found {name}")));
        }
        if let Some(n) = len {
            if data.len() != n {
                return Err(Error::format(
                    path,
                    format!("tensor {name} has {} values, expected {n}", data.len()),
                ));
            }
        }
        Ok((dims, data))
    };
    let (_, m) = next("meta.model", Some(8))?;
    let model = ModelConfig {
        vocab: as_count(m[0], "vocab", path)?,
        num_classes: as_count(m[1], "num_classes", path)?,
        seq_len: as_count(m[2], "seq_len", path)?,
        dim: as_count(m[3], "dim", path)?,
        layers: as_count(m[4], "layers", path)?,
        heads: as_count(m[5], "heads", path)?,
        mlp_ratio: as_count(m[6], "mlp_ratio", path)?,
        dropout: m[7],
    };
    let (_, t) = next("meta.train", Some(14))?;
    let join = |lo: f64, hi: f64| -> Result<u64> {
        Ok(as_count(lo, "seed", path)? as u64 | (as_count(hi, "seed", path)? as u64) << 32)
    };
    let config = TrainConfig {
        model,
        optimizer: crate::tensor::AdamWConfig {
            lr: t[0],
            beta1: t[1],
            beta2: t[2],
            eps: t[3],
            weight_decay: t[4],
        },
        batch_size: as_count(t[5], "batch_size", path)?,
        p_max: t[6],
        segment_len: as_count(t[7], "segment_len", path)?,
        seed: join(t[8], t[9])?,
        steps: as_count(t[10], "steps", path)? as u64,
        eval_every: as_count(t[11], "eval_every", path)? as u64,
        checkpoint_every: as_count(t[12], "checkpoint_every", path)? as u64,
        reference: t[13] != 0.0,
    };
    let (_, l) = next("meta.layout", Some(6))?;
    let layout = TokenLayout::new(
        as_count(l[0], "frames", path)?,
        as_count(l[1], "grid_rows", path)?,
        as_count(l[2], "grid_cols", path)?,
        as_count(l[3], "frame_tok_rows", path)?,
        as_count(l[4], "frame_tok_cols", path)?,
    )?;
    let order = match l[5] {
        0.0 => TokenOrder::GridRaster,
        1.0 => TokenOrder::FrameMajor,
        v => return Err(Error::format(path, format!("unknown token order code {v}"))),
    };
    let template = crate::model::Transformer::param_shapes(&config.model)?;
    let mut params = Vec::with_capacity(template.len());
    for (name, dims) in &template {
        let n = dims.iter().product();
        let (got, data) = next(name, Some(n))?;
        if &got != dims {
            return Err(Error::format(path, format!("tensor {name} has dims {got:?}, expected {dims:?}")));
        }
        params.push((name.clone(), Tensor::new(got, data)?));
    }
    let mut moments = [Vec::new(), Vec::new()];
    for (prefix, buf) in ["adamw.m.", "adamw.v."].iter().zip(moments.iter_mut()) {
        for (name, dims) in &template {
            let (_, data) = next(&format!("{prefix}{name}"), Some(dims.iter().product()))?;
            buf.push(data);
        }
    }
    let (_, rng) = next("rng.state", Some(3))?;
    if join(rng[0], rng[1])? != config.seed || rng[2] != step as f64 {
        return Err(Error::format(path, "generator state disagrees with header step or seed"));
    }
    let (_, geo) = next("meta.codebook", Some(3))?;
    let (cdims, words) = next("codebook", None)?;
    if cdims.len() != 2 {
        return Err(Error::format(path, "codebook tensor must be rank 2"));
    }
    let codebook = CodeBook::new(
        cdims[0],
        as_count(geo[0], "patch_h", path)?,
        as_count(geo[1], "patch_w", path)?,
        as_count(geo[2], "channels", path)?,
        words,
    )
    .map_err(|e| Error::format(path, e.to_string()))?;
    if it.next().is_some() {
        return Err(Error::format(path, "unexpected trailing tensors"));
    }
    let [adam_m, adam_v] = moments;
    Ok(Checkpoint {
        step,
        config,
        layout,
        order,
        codebook,
        params,
        adam_m,
        adam_v,
    })
}
