//! Flag/config merging and the token-directory layout shared by commands.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use gridvid::config::FlatConfig;
use gridvid::formats::{read_tokens, write_file};
use gridvid::sgp::{TokenLayout, TokenOrder};
use gridvid::trainer::{Dataset, Example, TrainConfig};
use gridvid::{Error, Result};

use crate::{CliError, CliResult, Common};

/// Environment variable overriding the generation worker count.
pub const THREADS_ENV: &str = "THREADS";

/// Training hyperparameters settable from the command line. Each also has a
/// config key of the same name with underscores.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Optimizer steps [default 2000].
    #[arg(long)]
    pub steps: Option<u64>,
    /// Masking ceiling; 0 disables masking [default 0.3].
    #[arg(long)]
    pub p_max: Option<f64>,
    /// Tokens per masking segment [default 8].
    #[arg(long)]
    pub segment_len: Option<usize>,
    /// Learning rate [default 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Clips per batch [default 8].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Model width [default 128].
    #[arg(long)]
    pub dim: Option<usize>,
    /// Transformer blocks [default 4].
    #[arg(long)]
    pub layers: Option<usize>,
    /// Attention heads [default 4].
    #[arg(long)]
    pub heads: Option<usize>,
    /// Evaluation-loss cadence; 0 disables [default 500].
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Periodic checkpoint cadence; 0 disables [default 500].
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Log 0 for wall time so logs are byte-reproducible.
    #[arg(long)]
    pub reference: bool,
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        let o = &mut cfg.optimizer;
        set(&mut cfg.steps, self.steps);
        set(&mut cfg.p_max, self.p_max);
        set(&mut cfg.segment_len, self.segment_len);
        set(&mut o.lr, self.lr);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.model.dim, self.dim);
        set(&mut cfg.model.layers, self.layers);
        set(&mut cfg.model.heads, self.heads);
        set(&mut cfg.eval_every, self.eval_every);
        set(&mut cfg.checkpoint_every, self.checkpoint_every);
        if self.reference {
            cfg.reference = true;
        }
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Loads `--config` (empty when absent).
pub fn load_config(common: &Common) -> Result<FlatConfig> {
    match &common.config {
        Some(p) => FlatConfig::load(p),
        None => Ok(FlatConfig::default()),
    }
}

/// Flag, else config key, else `default`. The key is always consumed.
pub fn setting<T: FromStr>(flag: Option<T>, cfg: &mut FlatConfig, key: &str, default: T) -> Result<T> {
    let from_cfg = cfg.take(key)?;
    Ok(flag.or(from_cfg).unwrap_or(default))
}

/// Like [`setting`] without a default.
pub fn optional<T: FromStr>(flag: Option<T>, cfg: &mut FlatConfig, key: &str) -> Result<Option<T>> {
    let from_cfg = cfg.take(key)?;
    Ok(flag.or(from_cfg))
}

/// Root seed: `--seed`, else config `seed`, else 0.
pub fn seed(common: &Common, cfg: &mut FlatConfig) -> Result<u64> {
    setting(common.seed, cfg, "seed", 0)
}

pub fn order(flag: Option<String>, cfg: &mut FlatConfig) -> Result<TokenOrder> {
    TokenOrder::parse(&setting(flag, cfg, "order", "grid".to_string())?)
}

/// Worker threads for generation.
pub fn threads() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// File names inside a token directory.
pub const TOKEN_LAYOUT_FILE: &str = "layout.cfg";
pub const TOKEN_INDEX_FILE: &str = "tokens.tsv";

/// Writes the layout description of a token directory.
pub fn write_token_layout(dir: &Path, layout: &TokenLayout, order: TokenOrder, vocab: usize) -> Result<()> {
    let text = format!(
        "frames = {}\ngrid_rows = {}\ngrid_cols = {}\nframe_tok_rows = {}\nframe_tok_cols = {}\norder = {}\nvocab = {}\n",
        layout.frames,
        layout.grid_rows,
        layout.grid_cols,
        layout.frame_tok_rows,
        layout.frame_tok_cols,
        order.name(),
        vocab
    );
    write_file(&dir.join(TOKEN_LAYOUT_FILE), text.as_bytes())
}

/// Reads a token directory written by `encode --data`.
pub fn read_token_dir(dir: &Path) -> Result<Dataset> {
    let layout_path = dir.join(TOKEN_LAYOUT_FILE);
    let mut cfg = FlatConfig::load(&layout_path)?;
    let mut need = |key: &str| -> Result<usize> {
        cfg.take(key)?
            .ok_or_else(|| Error::format(&layout_path, format!("missing key `{key}`")))
    };
    let layout = TokenLayout::new(
        need("frames")?,
        need("grid_rows")?,
        need("grid_cols")?,
        need("frame_tok_rows")?,
        need("frame_tok_cols")?,
    )?;
    let vocab = need("vocab")?;
    let order_name: String = cfg
        .take("order")?
        .ok_or_else(|| Error::format(&layout_path, "missing key `order`"))?;
    let order = TokenOrder::parse(&order_name)?;
    cfg.finish()?;

    let index_path = dir.join(TOKEN_INDEX_FILE);
    let index = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut examples = Vec::new();
    for (lineno, line) in index.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let name = line.split('\t').next().unwrap_or_default();
        if name.is_empty() {
            return Err(Error::format(&index_path, format!("line {}: empty path", lineno + 1)));
        }
        let path: PathBuf = dir.join(name);
        let tf = read_tokens(&path)?;
        if tf.ids.len() != layout.seq_len() || tf.vocab as usize != vocab {
            return Err(Error::format(
                &path,
                format!(
                    "{} tokens over vocab {}, directory layout expects {} over {vocab}",
                    tf.ids.len(),
                    tf.vocab,
                    layout.seq_len()
                ),
            ));
        }
        examples.push(Example {
            class_id: tf.label as usize,
            tokens: tf.ids_usize(),
        });
    }
    if examples.is_empty() {
        return Err(Error::format(&index_path, "no token files listed"));
    }
    Ok(Dataset {
        layout,
        order,
        vocab,
        examples,
    })
}

/// Parses `0,0.1,0.3`.
pub fn parse_grid(text: &str) -> CliResult<Vec<f64>> {
    let values: Vec<f64> = text
        .split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Usage(format!("--grid: `{s}` is not a number")))
        })
        .collect::<CliResult<_>>()?;
    if values.is_empty() {
        return Err(CliError::Usage("--grid is empty".into()));
    }
    Ok(values)
}
