//! Training loop: batching, token masking, AdamW updates, logging and
//! checkpointing.
//!
//! Everything random is derived from the configured seed: the model
//! initialization, a fresh permutation of the dataset per epoch, and one mask
//! seed per `(step, batch slot)`. A checkpoint therefore only needs the seed
//! and the step count to resume the exact same stream.

mod checkpoint;

pub use checkpoint::{canonical_config, fnv1a32, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::formats::{read_clip, write_file};
use crate::model::{ModelConfig, TrainItem, Transformer};
use crate::pipeline::{layout_for, tokenize_clip};
use crate::sat::MaskPlan;
use crate::seed;
use crate::sgp::{TokenLayout, TokenOrder};
use crate::synthdata::read_manifest;
use crate::tensor::{AdamW, AdamWConfig, Tensor};
use crate::video::VideoClip;
use crate::vq::CodeBook;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    /// Total optimizer steps.
    pub steps: u64,
    pub p_max: f64,
    /// Tokens per masking segment.
    pub segment_len: usize,
    pub seed: u64,
    /// Evaluation-loss cadence in steps; 0 disables.
    pub eval_every: u64,
    /// Periodic checkpoint cadence in steps; 0 disables.
    pub checkpoint_every: u64,
    /// Writes 0 for `wall_ms` so logs are byte-reproducible.
    pub reference: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamWConfig::default(),
            batch_size: 8,
            steps: 2000,
            p_max: 0.3,
            segment_len: 8,
            seed: 0,
            eval_every: 500,
            checkpoint_every: 500,
            reference: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", o.lr)));
        }
        for (name, b) in [("beta1", o.beta1), ("beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(o.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", o.eps)));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                o.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.p_max) {
            return Err(Error::Config(format!("p_max must lie in [0, 1), got {}", self.p_max)));
        }
        if self.segment_len < 2 || self.model.seq_len % self.segment_len != 0 {
            return Err(Error::Config(format!(
                "segment_len = {} must be at least 2 and divide seq_len = {}",
                self.segment_len, self.model.seq_len
            )));
        }
        Ok(())
    }

    /// Consumes the keys this struct understands from `flat`.
    pub fn apply(&mut self, flat: &mut FlatConfig) -> Result<()> {
        flat.take_into("dim", &mut self.model.dim)?;
        flat.take_into("layers", &mut self.model.layers)?;
        flat.take_into("heads", &mut self.model.heads)?;
        flat.take_into("mlp_ratio", &mut self.model.mlp_ratio)?;
        flat.take_into("dropout", &mut self.model.dropout)?;
        flat.take_into("lr", &mut self.optimizer.lr)?;
        flat.take_into("beta1", &mut self.optimizer.beta1)?;
        flat.take_into("beta2", &mut self.optimizer.beta2)?;
        flat.take_into("eps", &mut self.optimizer.eps)?;
        flat.take_into("weight_decay", &mut self.optimizer.weight_decay)?;
        flat.take_into("batch_size", &mut self.batch_size)?;
        flat.take_into("steps", &mut self.steps)?;
        flat.take_into("p_max", &mut self.p_max)?;
        flat.take_into("segment_len", &mut self.segment_len)?;
        flat.take_into("seed", &mut self.seed)?;
        flat.take_into("eval_every", &mut self.eval_every)?;
        flat.take_into("checkpoint_every", &mut self.checkpoint_every)?;
        flat.take_into("reference", &mut self.reference)?;
        Ok(())
    }
}

/// One tokenized clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub class_id: usize,
    pub tokens: Vec<usize>,
}

/// Tokenized training clips sharing one layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub layout: TokenLayout,
    pub order: TokenOrder,
    pub vocab: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn from_clips(clips: &[VideoClip], codebook: &CodeBook, order: TokenOrder) -> Result<Self> {
        let first = clips
            .first()
            .ok_or_else(|| Error::Domain("dataset has no clips".into()))?;
        let layout = layout_for(first, codebook)?;
        let examples = clips
            .iter()
            .map(|c| {
                Ok(Example {
                    class_id: c.label as usize,
                    tokens: tokenize_clip(c, codebook, &layout, order)?
                        .into_iter()
                        .map(|t| t as usize)
                        .collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layout,
            order,
            vocab: codebook.size(),
            examples,
        })
    }

    pub fn from_manifest(manifest: &Path, codebook: &CodeBook, order: TokenOrder) -> Result<Self> {
        let clips = read_manifest(manifest)?
            .iter()
            .map(|e| {
                let mut clip = read_clip(&e.path)?;
                if clip.label != e.label {
                    return Err(Error::format(
                        &e.path,
                        format!("label {} disagrees with manifest label {}", clip.label, e.label),
                    ));
                }
                clip.seed = e.seed;
                Ok(clip)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_clips(&clips, codebook, order)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub masked_fraction: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step\tloss\tmasked_fraction\twall_ms";

impl MetricRow {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.step, self.loss, self.masked_fraction, self.wall_ms)
    }
}

/// Rows plus header, one line each.
pub fn format_metrics(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub metrics: Vec<MetricRow>,
    /// `(step, loss)` on the evaluation subset with masking off.
    pub evals: Vec<(u64, f64)>,
}

pub struct Trainer {
    config: TrainConfig,
    layout: TokenLayout,
    order: TokenOrder,
    codebook: CodeBook,
    model: Transformer,
    optimizer: AdamW,
    step: u64,
    epoch_order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    /// Fresh model. `config.model.vocab` and `seq_len` must match the data.
    pub fn new(config: TrainConfig, codebook: CodeBook, layout: TokenLayout, order: TokenOrder) -> Result<Self> {
        config.validate()?;
        if config.model.vocab != codebook.size() {
            return Err(Error::Config(format!(
                "vocab = {} but the codebook has {} codewords",
                config.model.vocab,
                codebook.size()
            )));
        }
        if config.model.seq_len != layout.seq_len() {
            return Err(Error::Config(format!(
                "seq_len = {} but the token layout has {} positions",
                config.model.seq_len,
                layout.seq_len()
            )));
        }
        let model = Transformer::init(config.model, seed::derive(config.seed, &[0]))?;
        let optimizer = AdamW::new(config.optimizer, model.params(), model.decay_flags())?;
        Ok(Self {
            config,
            layout,
            order,
            codebook,
            model,
            optimizer,
            step: 0,
            epoch_order: None,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let model = Transformer::from_params(ckpt.config.model, ckpt.params)?;
        let optimizer = AdamW::from_parts(
            ckpt.config.optimizer,
            ckpt.step,
            ckpt.adam_m,
            ckpt.adam_v,
            model.decay_flags(),
        )?;
        Ok(Self {
            config: ckpt.config,
            layout: ckpt.layout,
            order: ckpt.order,
            codebook: ckpt.codebook,
            model,
            optimizer,
            step: ckpt.step,
            epoch_order: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Changes the step budget (resume to a later target).
    pub fn set_total_steps(&mut self, steps: u64) {
        self.config.steps = steps;
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self
            .model
            .names()
            .iter()
            .zip(self.model.params())
            .map(|(n, t)| {
                let t = Tensor::new(t.dims().to_vec(), t.data().to_vec()).expect("valid dims");
                (n.clone(), t)
            })
            .collect();
        Checkpoint {
            step: self.step,
            config: self.config,
            layout: self.layout,
            order: self.order,
            codebook: self.codebook.clone(),
            params,
            adam_m: self.optimizer.first_moments().to_vec(),
            adam_v: self.optimizer.second_moments().to_vec(),
        }
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Domain("training dataset is empty".into()));
        }
        if data.layout != self.layout || data.order != self.order {
            return Err(Error::Incompatible(format!(
                "dataset layout {:?}/{} differs from the trainer's {:?}/{}",
                data.layout,
                data.order.name(),
                self.layout,
                self.order.name()
            )));
        }
        if data.vocab != self.config.model.vocab {
            return Err(Error::Config(format!(
                "vocab = {} but the dataset was encoded with {} codewords",
                self.config.model.vocab, data.vocab
            )));
        }
        if let Some(e) = data
            .examples
            .iter()
            .find(|e| e.class_id >= self.config.model.num_classes)
        {
            return Err(Error::Config(format!(
                "num_classes = {} but the dataset has label {}",
                self.config.model.num_classes, e.class_id
            )));
        }
        Ok(())
    }

    /// Dataset indices for the current step: a global stream over
    /// per-epoch permutations.
    fn batch_indices(&mut self, n: usize) -> Vec<usize> {
        let b = self.config.batch_size as u64;
        (0..b)
            .map(|slot| {
                let global = self.step * b + slot;
                let epoch = global / n as u64;
                if self.epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut seed::rng(seed::derive(self.config.seed, &[1, epoch])));
                    self.epoch_order = Some((epoch, perm));
                }
                let (_, perm) = self.epoch_order.as_ref().expect("set above");
                perm[(global % n as u64) as usize]
            })
            .collect()
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self, data: &Dataset) -> Result<MetricRow> {
        let start = Instant::now();
        let picks = self.batch_indices(data.len());
        let d = self.config.model.dim;
        let plans = picks
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                let emb = self.model.embed_tokens(&data.examples[i].tokens)?;
                let mask_seed = seed::derive(self.config.seed, &[2, self.step, slot as u64]);
                MaskPlan::build(&emb, d, self.config.segment_len, self.config.p_max, mask_seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<TrainItem> = picks
            .iter()
            .zip(&plans)
            .map(|(&i, plan)| TrainItem {
                class_id: data.examples[i].class_id,
                tokens: &data.examples[i].tokens,
                plan: Some(plan),
            })
            .collect();
        let loss = self.model.loss_and_grads(&items)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss} at step {}", self.step + 1)));
        }
        self.optimizer.step(self.model.params_mut())?;
        self.step += 1;
        let masked: usize = plans.iter().map(MaskPlan::masked_count).sum();
        let total: usize = plans.iter().map(MaskPlan::len).sum();
        Ok(MetricRow {
            step: self.step,
            loss,
            masked_fraction: masked as f64 / total as f64,
            wall_ms: if self.config.reference {
                0
            } else {
                start.elapsed().as_millis() as u64
            },
        })
    }

    /// Mean loss with masking off over the first `batch_size` examples.
    pub fn eval_loss(&self, data: &Dataset) -> Result<f64> {
        let n = data.len().min(self.config.batch_size);
        let items: Vec<(usize, &[usize])> = data.examples[..n]
            .iter()
            .map(|e| (e.class_id, e.tokens.as_slice()))
            .collect();
        self.model.eval_loss(&items)
    }

    /// Trains until `config.steps`, writing periodic checkpoints
    /// `step_NNNNNN.ckpt` into `checkpoint_dir` when given.
    pub fn run(&mut self, data: &Dataset, checkpoint_dir: Option<&Path>) -> Result<RunLog> {
        self.check_data(data)?;
        let mut log = RunLog::default();
        while self.step < self.config.steps {
            let row = self.train_step(data)?;
            log.metrics.push(row);
            let s = self.step;
            if self.config.eval_every > 0 && s % self.config.eval_every == 0 {
                log.evals.push((s, self.eval_loss(data)?));
            }
            if let Some(dir) = checkpoint_dir {
                if self.config.checkpoint_every > 0 && s % self.config.checkpoint_every == 0 {
                    self.checkpoint().save(&dir.join(format!("step_{s:06}.ckpt")))?;
                }
            }
        }
        Ok(log)
    }
}

/// Trains from scratch on `data` and returns the final checkpoint.
pub fn train(config: TrainConfig, data: &Dataset, codebook: CodeBook, checkpoint_dir: Option<&Path>) -> Result<(Checkpoint, RunLog)> {
    let mut trainer = Trainer::new(config, codebook, data.layout, data.order)?;
    let log = trainer.run(data, checkpoint_dir)?;
    Ok((trainer.checkpoint(), log))
}

/// Writes `metrics.tsv` (and `eval.tsv` when non-empty) into `dir`.
pub fn write_logs(dir: &Path, log: &RunLog, append: bool) -> Result<()> {
    let metrics = dir.join("metrics.tsv");
    let mut text = if append {
        std::fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?
    } else {
        format_metrics(&[])
    };
    for r in &log.metrics {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    write_file(&metrics, text.as_bytes())?;
    let eval = dir.join("eval.tsv");
    let mut etext = if append && eval.exists() {
        std::fs::read_to_string(&eval).map_err(|e| Error::io(&eval, e))?
    } else {
        String::from("step\teval_loss\n")
    };
    for (s, l) in &log.evals {
        etext.push_str(&format!("{s}\t{l}\n"));
    }
    if !log.evals.is_empty() || (append && eval.exists()) {
        write_file(&eval, etext.as_bytes())?;
    }
    Ok(())
}
