//! Evaluation: oracle accuracy of generated clips, feature-space Fréchet
//! distance, reconstruction PSNR, temporal consistency and the masking
//! ablation table.
//!
//! Fréchet distances here are computed on hand-made clip features (see
//! [`features`]) and are only comparable with each other; reports label them
//! "FD (artifact scale)".

pub mod features;
pub mod frechet;

pub use features::{FeatureExtractor, FEATURE_DIM, USAGE_BINS};
pub use frechet::{frechet_distance, frechet_from_moments, moments, sqrtm_psd};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{SamplerConfig, Transformer};
use crate::pipeline::{render_clip, tokenize_clip};
use crate::seed;
use crate::sgp::{compose_grid, TokenLayout, TokenOrder};
use crate::synthdata::{label_oracle, OracleThresholds, Verdict};
use crate::video::VideoClip;
use crate::vq::{self, CodeBook};

/// Mean over consecutive frame pairs of the mean absolute byte difference,
/// divided by 255.
pub fn temporal_consistency(clip: &VideoClip) -> Result<f64> {
    let frames = clip.frames();
    if frames.len() < 2 {
        return Err(Error::Domain(format!(
            "temporal consistency needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let mut total = 0.0;
    for pair in frames.windows(2) {
        let (a, b) = (pair[0].data(), pair[1].data());
        let s: u64 = a.iter().zip(b).map(|(x, y)| x.abs_diff(*y) as u64).sum();
        total += s as f64 / a.len() as f64;
    }
    Ok(total / (frames.len() - 1) as f64 / 255.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fidelity {
    /// `(correct, total)` per requested class; classes never requested have
    /// total 0.
    pub per_class: Vec<(usize, usize)>,
    pub correct: usize,
    pub total: usize,
}

impl Fidelity {
    pub fn overall(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn class_accuracy(&self, class: usize) -> Option<f64> {
        match self.per_class.get(class) {
            Some(&(c, t)) if t > 0 => Some(c as f64 / t as f64),
            _ => None,
        }
    }
}

/// Fraction of clips whose oracle verdict equals the requested label
/// (`clip.label`). Unclassifiable clips count as wrong.
pub fn conditional_fidelity(clips: &[VideoClip], th: &OracleThresholds) -> Result<Fidelity> {
    if clips.is_empty() {
        return Err(Error::Domain("conditional fidelity of an empty clip set".into()));
    }
    let classes = clips.iter().map(|c| c.label as usize + 1).max().unwrap_or(0);
    let mut per_class = vec![(0, 0); classes];
    let mut correct = 0;
    for clip in clips {
        let slot = &mut per_class[clip.label as usize];
        slot.1 += 1;
        if label_oracle(clip, th)? == Verdict::Class(clip.label) {
            slot.0 += 1;
            correct += 1;
        }
    }
    Ok(Fidelity {
        per_class,
        correct,
        total: clips.len(),
    })
}

/// Mean PSNR between each clip's grid image and its quantized reconstruction.
pub fn reconstruction_psnr(clips: &[VideoClip], codebook: &CodeBook, layout: &TokenLayout) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Domain("PSNR of an empty clip set".into()));
    }
    let mut sum = 0.0;
    for c in clips {
        let grid = compose_grid(c.frames(), layout.grid_rows, layout.grid_cols)?;
        let rec = vq::decode(&vq::encode(&grid, codebook)?, codebook)?;
        sum += vq::psnr(&grid, &rec)?;
    }
    Ok(sum / clips.len() as f64)
}

/// Everything needed to turn a model into clips.
#[derive(Clone, Copy, Debug)]
pub struct GenerationSetup<'a> {
    pub model: &'a Transformer,
    pub codebook: &'a CodeBook,
    pub layout: &'a TokenLayout,
    pub order: TokenOrder,
}

impl GenerationSetup<'_> {
    /// Clip `index` of `class`, sampled with seed
    /// `derive(sampler.seed, [class, index])`.
    pub fn generate_one(&self, class: usize, index: usize, sampler: &SamplerConfig) -> Result<VideoClip> {
        let s = seed::derive(sampler.seed, &[class as u64, index as u64]);
        let cfg = SamplerConfig { seed: s, ..*sampler };
        let ids = self.model.generate(class, self.layout.seq_len(), &cfg)?;
        render_clip(&ids, self.codebook, self.layout, self.order, class as u32, s)
    }

    /// `count` clips of one class. Work is split over `threads` workers;
    /// the output does not depend on the thread count.
    pub fn generate_class(&self, class: usize, count: usize, sampler: &SamplerConfig, threads: usize) -> Result<Vec<VideoClip>> {
        let threads = threads.clamp(1, count.max(1));
        if threads == 1 {
            return (0..count).map(|i| self.generate_one(class, i, sampler)).collect();
        }
        let chunk = count.div_ceil(threads);
        let parts: Vec<Result<Vec<VideoClip>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let lo = (w * chunk).min(count);
                    let hi = ((w + 1) * chunk).min(count);
                    scope.spawn(move || (lo..hi).map(|i| self.generate_one(class, i, sampler)).collect())
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("generation worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(count);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// `per_class` clips for every class, class-major.
    pub fn generate(&self, classes: usize, per_class: usize, sampler: &SamplerConfig, threads: usize) -> Result<Vec<VideoClip>> {
        let mut out = Vec::with_capacity(classes * per_class);
        for c in 0..classes {
            out.extend(self.generate_class(c, per_class, sampler, threads)?);
        }
        Ok(out)
    }
}

/// Mean over classes of the Fréchet distance between real and generated
/// features of that class.
pub fn per_class_frechet(real: &[(u32, Vec<f64>)], generated: &[(u32, Vec<f64>)]) -> Result<f64> {
    let classes = real.iter().map(|(l, _)| *l).max().map_or(0, |m| m as usize + 1);
    let mut sum = 0.0;
    let mut used = 0;
    for c in 0..classes as u32 {
        let pick = |set: &[(u32, Vec<f64>)]| -> Vec<Vec<f64>> {
            set.iter().filter(|(l, _)| *l == c).map(|(_, f)| f.clone()).collect()
        };
        let (a, b) = (pick(real), pick(generated));
        if a.is_empty() && b.is_empty() {
            continue;
        }
        sum += frechet_distance(&a, &b)
            .map_err(|e| Error::Domain(format!("class {c}: {e}")))?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Domain("no classes to compare".into()));
    }
    Ok(sum / used as f64)
}

/// Same features with the labels of `generated` permuted by `seed`.
pub fn shuffle_labels(generated: &[(u32, Vec<f64>)], seed: u64) -> Vec<(u32, Vec<f64>)> {
    let mut labels: Vec<u32> = generated.iter().map(|(l, _)| *l).collect();
    labels.shuffle(&mut seed::rng(seed));
    labels
        .into_iter()
        .zip(generated)
        .map(|(l, (_, f))| (l, f.clone()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_class_accuracy: Vec<f64>,
    pub overall_accuracy: f64,
    pub unclassifiable: usize,
    /// Mean per-class FD(real, generated).
    pub fd: f64,
    /// Mean per-class FD(real, generated with permuted labels).
    pub fd_shuffled: f64,
    /// FD over all classes pooled.
    pub fd_pooled: f64,
    pub psnr: f64,
    pub consistency_generated: f64,
    pub consistency_real: f64,
    pub real_count: usize,
    pub generated_count: usize,
    pub echo: String,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tvalue\n");
        let mut row = |k: &str, v: String| {
            s.push_str(k);
            s.push('\t');
            s.push_str(&v);
            s.push('\n');
        };
        for (c, a) in self.per_class_accuracy.iter().enumerate() {
            row(&format!("accuracy_class_{c}"), format!("{a:.6}"));
        }
        row("accuracy_overall", format!("{:.6}", self.overall_accuracy));
        row("unclassifiable", self.unclassifiable.to_string());
        row("fd_artifact_scale", format!("{:.6}", self.fd));
        row("fd_artifact_scale_label_shuffled", format!("{:.6}", self.fd_shuffled));
        row("fd_artifact_scale_pooled", format!("{:.6}", self.fd_pooled));
        row("psnr_db", format!("{:.6}", self.psnr));
        row("consistency_generated", format!("{:.6}", self.consistency_generated));
        row("consistency_real", format!("{:.6}", self.consistency_real));
        row("real_clips", self.real_count.to_string());
        row("generated_clips", self.generated_count.to_string());
        s.push_str("# FD (artifact scale) on hand-made clip features; ");
        s.push_str(&self.echo);
        s.push('\n');
        s
    }
}

/// Scores generated clips (requested class in `clip.label`) against real ones.
pub fn evaluate(
    real: &[VideoClip],
    generated: &[VideoClip],
    codebook: &CodeBook,
    layout: &TokenLayout,
    th: &OracleThresholds,
    shuffle_seed: u64,
    echo: String,
) -> Result<EvalReport> {
    if real.is_empty() || generated.is_empty() {
        return Err(Error::Domain("evaluation needs real and generated clips".into()));
    }
    let fid = conditional_fidelity(generated, th)?;
    let unclassifiable = generated
        .iter()
        .map(|c| label_oracle(c, th))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|v| *v == Verdict::Unclassifiable)
        .count();
    let fx = FeatureExtractor::new(codebook.clone(), *th);
    let label = |clips: &[VideoClip]| -> Result<Vec<(u32, Vec<f64>)>> {
        clips.iter().map(|c| Ok((c.label, fx.extract(c)?))).collect()
    };
    let rf = label(real)?;
    let gf = label(generated)?;
    let fd = per_class_frechet(&rf, &gf)?;
    let fd_shuffled = per_class_frechet(&rf, &shuffle_labels(&gf, shuffle_seed))?;
    let strip = |v: &[(u32, Vec<f64>)]| v.iter().map(|(_, f)| f.clone()).collect::<Vec<_>>();
    let fd_pooled = frechet_distance(&strip(&rf), &strip(&gf))?;
    let mean_tc = |clips: &[VideoClip]| -> Result<f64> {
        Ok(clips.iter().map(temporal_consistency).sum::<Result<f64>>()? / clips.len() as f64)
    };
    let classes = fid.per_class.len();
    Ok(EvalReport {
        per_class_accuracy: (0..classes).map(|c| fid.class_accuracy(c).unwrap_or(0.0)).collect(),
        overall_accuracy: fid.overall(),
        unclassifiable,
        fd,
        fd_shuffled,
        fd_pooled,
        psnr: reconstruction_psnr(real, codebook, layout)?,
        consistency_generated: mean_tc(generated)?,
        consistency_real: mean_tc(real)?,
        real_count: real.len(),
        generated_count: generated.len(),
        echo,
    })
}

/// Default training-time masking sweep: SAT off, then 0.1 … 0.4.
pub const ABLATION_GRID: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub arm: String,
    pub p_max: f64,
    pub fd: f64,
    pub accuracy: f64,
    pub consistency: f64,
}

/// Arm label for a sweep value: `w/o SAT` at 0.
pub fn arm_name(p_max: f64) -> String {
    if p_max == 0.0 {
        "w/o SAT".to_string()
    } else {
        format!("p_max={p_max}")
    }
}

/// One row per model, all evaluated under the same sampler seed.
pub fn ablation_rows(
    arms: &[(f64, GenerationSetup)],
    real: &[VideoClip],
    per_class: usize,
    sampler: &SamplerConfig,
    th: &OracleThresholds,
    threads: usize,
) -> Result<Vec<AblationRow>> {
    let Some((_, first)) = arms.first() else {
        return Err(Error::Domain("ablation needs at least one checkpoint".into()));
    };
    for (p, arm) in arms {
        if arm.layout != first.layout
            || arm.order != first.order
            || arm.codebook != first.codebook
            || arm.model.config() != first.model.config()
        {
            return Err(Error::Incompatible(format!(
                "checkpoint for p_max={p} does not share vocabulary, layout and model shape with the first"
            )));
        }
    }
    let classes = first.model.config().num_classes;
    let fx = FeatureExtractor::new(first.codebook.clone(), *th);
    let rf: Vec<(u32, Vec<f64>)> = real
        .iter()
        .map(|c| Ok((c.label, fx.extract(c)?)))
        .collect::<Result<_>>()?;
    arms.iter()
        .map(|(p, arm)| {
            let gen = arm.generate(classes, per_class, sampler, threads)?;
            let gf: Vec<(u32, Vec<f64>)> = gen
                .iter()
                .map(|c| Ok((c.label, fx.extract(c)?)))
                .collect::<Result<_>>()?;
            let consistency =
                gen.iter().map(temporal_consistency).sum::<Result<f64>>()? / gen.len() as f64;
            Ok(AblationRow {
                arm: arm_name(*p),
                p_max: *p,
                fd: per_class_frechet(&rf, &gf)?,
                accuracy: conditional_fidelity(&gen, th)?.overall(),
                consistency,
            })
        })
        .collect()
}

/// Tab-separated ablation table with a trailing sweep echo.
pub fn ablation_report(rows: &[AblationRow], echo: &str) -> String {
    let mut s = String::from("arm\tp_max\tfd_artifact_scale\taccuracy\tconsistency\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
            r.arm, r.p_max, r.fd, r.accuracy, r.consistency
        ));
    }
    let grid: Vec<String> = rows.iter().map(|r| r.p_max.to_string()).collect();
    s.push_str(&format!("# sweep p_max = {{{}}}; {echo}\n", grid.join(", ")));
    s
}

/// Tokenize-then-render round trip of real clips (what the model can at best
/// reproduce).
pub fn quantized(clips: &[VideoClip], codebook: &CodeBook, layout: &TokenLayout, order: TokenOrder) -> Result<Vec<VideoClip>> {
    clips
        .iter()
        .map(|c| {
            let ids = tokenize_clip(c, codebook, layout, order)?;
            render_clip(&ids, codebook, layout, order, c.label, c.seed)
        })
        .collect()
}
