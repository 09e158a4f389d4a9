//! Subcommand implementations.

use std::path::{Path, PathBuf};

use gridvid::eval::{
    ablation_report, ablation_rows, evaluate, reconstruction_psnr, GenerationSetup, ABLATION_GRID,
};
use gridvid::formats::{
    read_clip, read_codebook, read_tokens, write_clip, write_codebook, write_file, write_tokens, TokenFile,
};
use gridvid::model::{SamplerConfig, Transformer};
use gridvid::pipeline::{layout_for, render_clip, tokenize_clip};
use gridvid::sgp::{compose_grid, default_grid, TokenLayout};
use gridvid::synthdata::{make_dataset, read_manifest, write_manifest, ManifestEntry, OracleThresholds, MANIFEST_NAME};
use gridvid::trainer::{write_logs, Checkpoint, Dataset, TrainConfig, Trainer};
use gridvid::video::VideoClip;
use gridvid::vq::{fit_codebook, CodeBook};
use gridvid::{Error, Result};

use crate::options::{
    load_config, optional, order, parse_grid, read_token_dir, seed, setting, threads, write_token_layout,
    TOKEN_INDEX_FILE,
};
use crate::{
    AblateArgs, CliError, CliResult, DecodeArgs, EncodeArgs, EvalArgs, GenerateArgs, MakeDataArgs, SampleFlags,
    TrainArArgs, TrainVqArgs,
};

/// Name of the final checkpoint written by `train-ar`.
pub const MODEL_CKPT: &str = "model.ckpt";
/// Name of the report written by `ablate`.
pub const ABLATION_REPORT: &str = "ablation.tsv";
/// Steps between progress lines of `train-ar`.
const PROGRESS_EVERY: u64 = 100;

pub fn make_data(a: MakeDataArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    let seed = seed(&a.common, &mut cfg)?;
    let classes = setting(a.classes, &mut cfg, "classes", 3)?;
    let per_class = setting(a.per_class, &mut cfg, "per_class", 50)?;
    let frames = setting(a.frames, &mut cfg, "frames", 16)?;
    let size = setting(a.size, &mut cfg, "size", 32)?;
    cfg.finish()?;
    let entries = make_dataset(per_class, seed, frames, size, size, classes, &a.out)?;
    println!(
        "wrote {} clips and {}",
        entries.len(),
        a.out.join(MANIFEST_NAME).display()
    );
    Ok(())
}

/// Clips listed in a manifest, checked against their manifest labels.
pub fn read_manifest_clips(manifest: &Path) -> Result<Vec<VideoClip>> {
    read_manifest(manifest)?
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
        .collect()
}

pub fn train_vq(a: TrainVqArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    let seed = seed(&a.common, &mut cfg)?;
    let k = setting(a.codebook_size, &mut cfg, "codebook_size", 64)?;
    let patch = setting(a.patch, &mut cfg, "patch", 8)?;
    let iters = setting(a.iters, &mut cfg, "iters", 20)?;
    cfg.finish()?;
    let clips = read_manifest_clips(&a.data)?;
    let Some(first) = clips.first() else {
        return Err(Error::format(&a.data, "manifest lists no clips").into());
    };
    let (rows, cols) = default_grid(first.num_frames());
    let images = clips
        .iter()
        .map(|c| compose_grid(c.frames(), rows, cols))
        .collect::<Result<Vec<_>>>()?;
    let report = fit_codebook(&images, k, patch, patch, iters, seed)?;
    let layout = layout_for(first, &report.codebook)?;
    let psnr = reconstruction_psnr(&clips, &report.codebook, &layout)?;
    write_codebook(&a.out, &report.codebook)?;
    println!(
        "codebook K={k} patch={patch}x{patch} inertia={:.6} psnr_db={psnr:.3} -> {}",
        report.inertia.last().copied().unwrap_or(0.0),
        a.out.display()
    );
    Ok(())
}

pub fn encode(a: EncodeArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    let _ = seed(&a.common, &mut cfg)?;
    let order = order(a.order, &mut cfg)?;
    cfg.finish()?;
    let cb = read_codebook(&a.codebook)?;
    let vocab = vocab_u32(&cb)?;
    if let Some(input) = &a.input {
        let clip = read_clip(input)?;
        let layout = layout_for(&clip, &cb)?;
        let ids = tokenize_clip(&clip, &cb, &layout, order)?;
        write_tokens(&a.out, &TokenFile::new(vocab, clip.label, ids)?)?;
        println!("wrote {}", a.out.display());
        return Ok(());
    }
    let manifest = a.data.as_ref().expect("clap requires --input or --data");
    let entries = read_manifest(manifest)?;
    let mut layout: Option<TokenLayout> = None;
    let mut index = String::new();
    for e in &entries {
        let clip = read_clip(&e.path)?;
        let lay = match layout {
            Some(l) => l,
            None => *layout.insert(layout_for(&clip, &cb)?),
        };
        let ids = tokenize_clip(&clip, &cb, &lay, order)
            .map_err(|err| Error::format(&e.path, err.to_string()))?;
        let stem = e
            .path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::format(&e.path, "clip path has no file name"))?;
        let name = format!("{stem}.tok");
        write_tokens(&a.out.join(&name), &TokenFile::new(vocab, clip.label, ids)?)?;
        index.push_str(&format!("{name}\t{}\t{}\n", e.label, e.seed));
    }
    let Some(layout) = layout else {
        return Err(Error::format(manifest, "manifest lists no clips").into());
    };
    write_token_layout(&a.out, &layout, order, cb.size())?;
    write_file(&a.out.join(TOKEN_INDEX_FILE), index.as_bytes())?;
    println!("encoded {} clips ({} order) -> {}", entries.len(), order.name(), a.out.display());
    Ok(())
}

fn vocab_u32(cb: &CodeBook) -> Result<u32> {
    u32::try_from(cb.size()).map_err(|_| Error::Shape(format!("codebook size {} does not fit in u32", cb.size())))
}

pub fn decode(a: DecodeArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    let seed = seed(&a.common, &mut cfg)?;
    let frames = setting(a.frames, &mut cfg, "frames", 16)?;
    let size = setting(a.size, &mut cfg, "size", 32)?;
    let order_flag = order(a.order, &mut cfg)?;
    cfg.finish()?;
    let tf = read_tokens(&a.input)?;
    let (cb, layout, order) = match &a.ckpt {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            (ckpt.codebook, ckpt.layout, ckpt.order)
        }
        None => {
            let path = a.codebook.as_ref().expect("clap requires --ckpt or --codebook");
            let cb = read_codebook(path)?;
            let layout = TokenLayout::for_clip(frames, size, size, cb.patch_h(), cb.patch_w())?;
            (cb, layout, order_flag)
        }
    };
    if tf.vocab as usize != cb.size() {
        return Err(Error::Incompatible(format!(
            "{}: token vocab {} but the codebook has {} codewords",
            a.input.display(),
            tf.vocab,
            cb.size()
        ))
        .into());
    }
    let clip = render_clip(&tf.ids, &cb, &layout, order, tf.label, seed)
        .map_err(|e| Error::format(&a.input, e.to_string()))?;
    write_clip(&a.out, &clip)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn num_classes(data: &Dataset) -> usize {
    data.examples.iter().map(|e| e.class_id + 1).max().unwrap_or(0)
}

/// Training config from defaults, config file and flags, sized to the data.
fn train_config(
    base: TrainConfig,
    common: &crate::Common,
    flags: &crate::TrainFlags,
    cfg: &mut gridvid::config::FlatConfig,
) -> Result<TrainConfig> {
    let mut tc = base;
    tc.apply(cfg)?;
    flags.apply(&mut tc);
    if let Some(s) = common.seed {
        tc.seed = s;
    }
    Ok(tc)
}

fn fit_to_data(tc: &mut TrainConfig, data: &Dataset, cb: &CodeBook) -> Result<()> {
    if data.vocab != cb.size() {
        return Err(Error::Incompatible(format!(
            "tokens use vocab {} but the codebook has {} codewords",
            data.vocab,
            cb.size()
        )));
    }
    tc.model.vocab = cb.size();
    tc.model.seq_len = data.layout.seq_len();
    tc.model.num_classes = num_classes(data);
    Ok(())
}

pub fn train_ar(a: TrainArArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    let cb = read_codebook(&a.codebook)?;
    let data = read_token_dir(&a.tokens)?;
    let (mut trainer, append) = match &a.resume {
        None => {
            let mut tc = train_config(TrainConfig::default(), &a.common, &a.train, &mut cfg)?;
            cfg.finish()?;
            fit_to_data(&mut tc, &data, &cb)?;
            (Trainer::new(tc, cb, data.layout, data.order)?, false)
        }
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            let before = ckpt.config_hash();
            ckpt.config = train_config(ckpt.config, &a.common, &a.train, &mut cfg)?;
            cfg.finish()?;
            if ckpt.config_hash() != before {
                return Err(Error::Incompatible(format!(
                    "{}: resume settings change the model, optimizer, masking or seed",
                    path.display()
                ))
                .into());
            }
            if ckpt.codebook != cb || ckpt.layout != data.layout || ckpt.order != data.order {
                return Err(Error::Incompatible(format!(
                    "{}: checkpoint was trained with a different codebook or token layout",
                    path.display()
                ))
                .into());
            }
            (Trainer::from_checkpoint(ckpt)?, a.out.join("metrics.tsv").exists())
        }
    };
    let total = trainer.config().steps;
    let mut log = gridvid::trainer::RunLog::default();
    while trainer.step_count() < total {
        trainer.set_total_steps((trainer.step_count() + PROGRESS_EVERY).min(total));
        let part = trainer.run(&data, Some(&a.out))?;
        if let Some(last) = part.metrics.last() {
            let eval = part
                .evals
                .last()
                .map(|(_, l)| format!(" eval_loss {l:.4}"))
                .unwrap_or_default();
            println!("step {}/{total} loss {:.4}{eval}", last.step, last.loss);
        }
        log.metrics.extend(part.metrics);
        log.evals.extend(part.evals);
    }
    trainer.checkpoint().save(&a.out.join(MODEL_CKPT))?;
    write_logs(&a.out, &log, append)?;
    println!("wrote {}", a.out.join(MODEL_CKPT).display());
    Ok(())
}

fn sampler(flags: &SampleFlags, cfg: &mut gridvid::config::FlatConfig, vocab: usize, seed: u64) -> Result<SamplerConfig> {
    let s = SamplerConfig {
        temperature: setting(flags.temperature, cfg, "temperature", 1.0)?,
        top_k: setting(flags.top_k, cfg, "top_k", vocab)?,
        seed,
    };
    s.validate(vocab)?;
    Ok(s)
}

pub fn generate(a: GenerateArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    let seed = seed(&a.common, &mut cfg)?;
    let class = optional(a.class, &mut cfg, "class")?;
    let num = setting(a.num, &mut cfg, "num", 8)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let sampler = sampler(&a.sample, &mut cfg, ckpt.config.model.vocab, seed)?;
    cfg.finish()?;
    let threads = threads()?;
    let classes = ckpt.config.model.num_classes;
    let wanted: Vec<usize> = match class {
        Some(c) if c >= classes => {
            return Err(Error::Domain(format!("class = {c} but the checkpoint knows {classes} classes")).into())
        }
        Some(c) => vec![c],
        None => (0..classes).collect(),
    };
    let model = Transformer::from_params(ckpt.config.model, ckpt.params)?;
    let setup = GenerationSetup {
        model: &model,
        codebook: &ckpt.codebook,
        layout: &ckpt.layout,
        order: ckpt.order,
    };
    let mut entries = Vec::new();
    for c in wanted {
        for (i, clip) in setup.generate_class(c, num, &sampler, threads)?.into_iter().enumerate() {
            let name = format!("c{c}_{i:04}.gfv");
            write_clip(&a.out.join(&name), &clip)?;
            entries.push(ManifestEntry {
                path: PathBuf::from(name),
                label: clip.label,
                seed: clip.seed,
            });
        }
    }
    write_manifest(&a.out.join(MANIFEST_NAME), &entries)?;
    println!("generated {} clips -> {}", entries.len(), a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    let seed = seed(&a.common, &mut cfg)?;
    cfg.finish()?;
    let cb = read_codebook(&a.codebook)?;
    let real = read_manifest_clips(&a.real)?;
    let generated = read_manifest_clips(&a.generated)?;
    let Some(first) = real.first() else {
        return Err(Error::format(&a.real, "manifest lists no clips").into());
    };
    let layout = layout_for(first, &cb)?;
    let echo = format!("seed={seed} real={} generated={}", real.len(), generated.len());
    let report = evaluate(&real, &generated, &cb, &layout, &OracleThresholds::default(), seed, echo)?;
    let text = report.to_tsv();
    print!("{text}");
    if let Some(out) = &a.out {
        write_file(out, text.as_bytes())?;
    }
    Ok(())
}

/// Checkpoint file of one ablation arm.
pub fn arm_checkpoint(p_max: f64) -> String {
    format!("pmax_{p_max}.ckpt")
}

pub fn ablate(a: AblateArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    let mut tc = train_config(TrainConfig::default(), &a.common, &a.train, &mut cfg)?;
    let default_grid: Vec<String> = ABLATION_GRID.iter().map(|p| p.to_string()).collect();
    let grid = parse_grid(&setting(a.grid, &mut cfg, "grid", default_grid.join(","))?)?;
    let per_class = setting(a.per_class, &mut cfg, "per_class", 30)?;
    let cb = read_codebook(&a.codebook)?;
    let data = read_token_dir(&a.tokens)?;
    fit_to_data(&mut tc, &data, &cb)?;
    let sampler = sampler(&a.sample, &mut cfg, cb.size(), tc.seed)?;
    cfg.finish()?;
    let threads = threads()?;
    for &p in &grid {
        if !(0.0..1.0).contains(&p) {
            return Err(CliError::Usage(format!("--grid: p_max {p} is outside [0, 1)")));
        }
    }
    let real = read_manifest_clips(&a.real)?;

    let mut models = Vec::with_capacity(grid.len());
    for &p in &grid {
        let arm = TrainConfig { p_max: p, ..tc };
        let mut trainer = Trainer::new(arm, cb.clone(), data.layout, data.order)?;
        let log = trainer.run(&data, None)?;
        let path = a.out.join(arm_checkpoint(p));
        trainer.checkpoint().save(&path)?;
        println!(
            "arm p_max={p}: final loss {:.4} -> {}",
            log.metrics.last().map_or(f64::NAN, |r| r.loss),
            path.display()
        );
        models.push((p, trainer.model().clone()));
    }
    let arms: Vec<(f64, GenerationSetup)> = models
        .iter()
        .map(|(p, m)| {
            (
                *p,
                GenerationSetup {
                    model: m,
                    codebook: &cb,
                    layout: &data.layout,
                    order: data.order,
                },
            )
        })
        .collect();
    let rows = ablation_rows(&arms, &real, per_class, &sampler, &OracleThresholds::default(), threads)?;
    let echo = format!(
        "seed={} steps={} per_class={per_class} temperature={} top_k={}",
        tc.seed, tc.steps, sampler.temperature, sampler.top_k
    );
    let text = ablation_report(&rows, &echo);
    write_file(&a.out.join(ABLATION_REPORT), text.as_bytes())?;
    print!("{text}");
    Ok(())
}
