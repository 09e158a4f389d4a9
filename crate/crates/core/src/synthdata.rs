//! Procedural class-conditional clips and the analytic label oracle.
//!
//! Every clip is a bright square over a static low-amplitude noise
//! background. The class decides how the square moves:
//!
//! | class | motion |
//! |-------|--------|
//! | 0 | drifts right 2 px/frame, wrapping horizontally |
//! | 1 | drifts down 2 px/frame, wrapping vertically |
//! | 2 | stays centred, side `round(H/8 · (1.5 + sin(2πt/T)))` |
//!
//! [`label_oracle`] recovers the class from pixels alone and is exact on clean
//! clips, which is what makes it usable for scoring generated clips.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::formats;
use crate::seed;
use crate::video::{Image, VideoClip};

pub const SQUARE_LEVEL: u8 = 230;
const BACKGROUND_BASE: u8 = 16;
const BACKGROUND_SPREAD: u8 = 16;
const MIN_EXTENT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionKind {
    HorizontalDrift,
    VerticalDrift,
    Pulse,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionClass {
    pub index: u32,
    pub kind: MotionKind,
    /// Pixels per frame for drifts; unused for pulses.
    pub velocity: usize,
    /// Pulse side is `height / amplitude_div · (1.5 + sin(2πt/T))`.
    pub amplitude_div: usize,
}

pub fn default_registry() -> Vec<MotionClass> {
    vec![
        MotionClass {
            index: 0,
            kind: MotionKind::HorizontalDrift,
            velocity: 2,
            amplitude_div: 8,
        },
        MotionClass {
            index: 1,
            kind: MotionKind::VerticalDrift,
            velocity: 2,
            amplitude_div: 8,
        },
        MotionClass {
            index: 2,
            kind: MotionKind::Pulse,
            velocity: 0,
            amplitude_div: 8,
        },
    ]
}

pub fn num_classes() -> usize {
    default_registry().len()
}

/// Side of the pulsing square at frame `t`.
pub fn pulse_side(height: usize, amplitude_div: usize, t: usize, frames: usize) -> usize {
    let s = height as f64 / amplitude_div as f64 * (1.5 + (2.0 * PI * t as f64 / frames as f64).sin());
    (s.round() as usize).max(1)
}

/// Generates one grayscale clip. Pure function of its arguments.
pub fn generate_clip(
    class_id: u32,
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<VideoClip> {
    let registry = default_registry();
    let class = registry
        .iter()
        .find(|c| c.index == class_id)
        .ok_or_else(|| {
            Error::Domain(format!(
                "unknown class {class_id}; registry has {} classes",
                registry.len()
            ))
        })?;
    if frames < MIN_EXTENT || height < MIN_EXTENT || width < MIN_EXTENT {
        return Err(Error::Domain(format!(
            "clip extents must be at least {MIN_EXTENT}, got T={frames} H={height} W={width}"
        )));
    }

    let mut rng = seed::rng(seed);
    let background: Vec<u8> = (0..height * width)
        .map(|_| BACKGROUND_BASE + rng.random_range(0..BACKGROUND_SPREAD))
        .collect();
    let side = height / 4;
    // Even offsets keep the square aligned to the 2-px motion lattice.
    let x0 = 2 * rng.random_range(0..width / 2);
    let y0 = 2 * rng.random_range(0..(height - side) / 2 + 1);
    let x0v = 2 * rng.random_range(0..(width - side) / 2 + 1);
    let y0v = 2 * rng.random_range(0..height / 2);

    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut img = Image::new(height, width, 1, background.clone())?;
        match class.kind {
            MotionKind::HorizontalDrift => {
                let x = x0 + class.velocity * t;
                for dy in 0..side {
                    for dx in 0..side {
                        img.set(y0 + dy, (x + dx) % width, 0, SQUARE_LEVEL);
                    }
                }
            }
            MotionKind::VerticalDrift => {
                let y = y0v + class.velocity * t;
                for dy in 0..side {
                    for dx in 0..side {
                        img.set((y + dy) % height, x0v + dx, 0, SQUARE_LEVEL);
                    }
                }
            }
            MotionKind::Pulse => {
                let s = pulse_side(height, class.amplitude_div, t, frames)
                    .min(height)
                    .min(width);
                let (ys, xs) = ((height - s) / 2, (width - s) / 2);
                for dy in 0..s {
                    for dx in 0..s {
                        img.set(ys + dy, xs + dx, 0, SQUARE_LEVEL);
                    }
                }
            }
        }
        out.push(img);
    }
    VideoClip::new(out, class_id, seed)
}

/// Fixed decision thresholds of the label oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleThresholds {
    /// Pixels brighter than this count as foreground.
    pub foreground: f64,
    /// Minimum mean centroid speed (px/frame) for a drift verdict.
    pub min_motion: f64,
    /// Minimum mean relative foreground-area change for a pulse verdict.
    pub min_area_change: f64,
}

impl Default for OracleThresholds {
    fn default() -> Self {
        Self {
            foreground: 128.0,
            min_motion: 0.5,
            min_area_change: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Class(u32),
    Unclassifiable,
}

impl Verdict {
    pub fn class(self) -> Option<u32> {
        match self {
            Verdict::Class(c) => Some(c),
            Verdict::Unclassifiable => None,
        }
    }
}

/// Motion summary the oracle decides on; also reused as clip features.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MotionStats {
    /// Mean signed wrapped centroid displacement per frame.
    pub mean_dx: f64,
    pub mean_dy: f64,
    pub mean_abs_dx: f64,
    pub mean_abs_dy: f64,
    /// Mean `|A_{t+1} − A_t| / max(A_t, A_{t+1})` over frame pairs.
    pub mean_area_change: f64,
    /// Mean foreground fraction per frame.
    pub mean_area: f64,
    /// Number of consecutive frame pairs with foreground in both frames.
    pub pairs: usize,
}

struct FrameFg {
    area: usize,
    cx: f64,
    cy: f64,
}

/// Circular mean position of `weights` along an axis of length `n`.
fn circular_mean(sin_sum: f64, cos_sum: f64, n: usize) -> f64 {
    let a = sin_sum.atan2(cos_sum);
    let a = if a < 0.0 { a + 2.0 * PI } else { a };
    a * n as f64 / (2.0 * PI)
}

fn wrap(d: f64, n: usize) -> f64 {
    let n = n as f64;
    let mut d = d % n;
    if d > n / 2.0 {
        d -= n;
    } else if d <= -n / 2.0 {
        d += n;
    }
    d
}

fn foreground(frame: &Image, threshold: f64) -> FrameFg {
    let (h, w, _) = frame.dims();
    let (mut sx, mut cx, mut sy, mut cy) = (0.0, 0.0, 0.0, 0.0);
    let mut area = 0;
    for y in 0..h {
        let ay = 2.0 * PI * y as f64 / h as f64;
        for x in 0..w {
            let v = frame.intensity(y, x);
            if v > threshold {
                let wgt = v - threshold;
                let ax = 2.0 * PI * x as f64 / w as f64;
                sx += wgt * ax.sin();
                cx += wgt * ax.cos();
                sy += wgt * ay.sin();
                cy += wgt * ay.cos();
                area += 1;
            }
        }
    }
    FrameFg {
        area,
        cx: circular_mean(sx, cx, w),
        cy: circular_mean(sy, cy, h),
    }
}

/// Foreground centroid motion and area dynamics of a clip.
pub fn motion_stats(clip: &VideoClip, th: &OracleThresholds) -> MotionStats {
    let (h, w, _) = clip.frame_dims();
    let fg: Vec<FrameFg> = clip
        .frames()
        .iter()
        .map(|f| foreground(f, th.foreground))
        .collect();
    let mut s = MotionStats {
        mean_area: fg.iter().map(|f| f.area as f64).sum::<f64>() / (fg.len() * h * w) as f64,
        ..Default::default()
    };
    for pair in fg.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.area == 0 || b.area == 0 {
            continue;
        }
        let dx = wrap(b.cx - a.cx, w);
        let dy = wrap(b.cy - a.cy, h);
        s.mean_dx += dx;
        s.mean_dy += dy;
        s.mean_abs_dx += dx.abs();
        s.mean_abs_dy += dy.abs();
        s.mean_area_change += a.area.abs_diff(b.area) as f64 / a.area.max(b.area) as f64;
        s.pairs += 1;
    }
    if s.pairs > 0 {
        let n = s.pairs as f64;
        s.mean_dx /= n;
        s.mean_dy /= n;
        s.mean_abs_dx /= n;
        s.mean_abs_dy /= n;
        s.mean_area_change /= n;
    }
    s
}

/// Classifies a clip by the motion of its bright foreground.
///
/// Horizontal-dominant mean drift gives 0, vertical-dominant gives 1, and a
/// stationary foreground whose area changes gives 2. Anything else, including
/// clips whose frames are all identical, is [`Verdict::Unclassifiable`].
pub fn label_oracle(clip: &VideoClip, th: &OracleThresholds) -> Result<Verdict> {
    if clip.num_frames() < 2 {
        return Err(Error::Domain(
            "label oracle needs at least 2 frames".into(),
        ));
    }
    let frames = clip.frames();
    if frames.iter().all(|f| f == &frames[0]) {
        return Ok(Verdict::Unclassifiable);
    }
    let s = motion_stats(clip, th);
    if s.pairs == 0 {
        return Ok(Verdict::Unclassifiable);
    }
    let (hm, vm) = (s.mean_dx.abs(), s.mean_dy.abs());
    Ok(if hm.max(vm) >= th.min_motion {
        Verdict::Class(if hm >= vm { 0 } else { 1 })
    } else if s.mean_area_change >= th.min_area_change {
        Verdict::Class(2)
    } else {
        Verdict::Unclassifiable
    })
}

/// One row of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: u32,
    pub seed: u64,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Writes `n_per_class` clips per registry class plus `manifest.tsv`.
pub fn make_dataset(
    n_per_class: usize,
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    let available = self::num_classes();
    if num_classes == 0 || num_classes > available {
        return Err(Error::Domain(format!(
            "requested {num_classes} classes; registry has {available}"
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(n_per_class * num_classes);
    for class in 0..num_classes as u32 {
        for i in 0..n_per_class {
            let clip_seed = seed::derive(seed, &[class as u64, i as u64]);
            let clip = generate_clip(class, clip_seed, frames, height, width)?;
            let name = format!("c{class}_{i:04}.gfv");
            formats::write_clip(&out_dir.join(&name), &clip)?;
            entries.push(ManifestEntry {
                path: PathBuf::from(name),
                label: class,
                seed: clip_seed,
            });
        }
    }
    write_manifest(&out_dir.join(MANIFEST_NAME), &entries)?;
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        let _ = writeln!(text, "{}\t{}\t{}", e.path.display(), e.label, e.seed);
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a manifest. Relative paths are resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| {
            Error::format(path, format!("line {}: {what}", lineno + 1))
        };
        if cols.len() != 3 {
            return Err(bad(&format!("expected 3 tab-separated fields, got {}", cols.len())));
        }
        let label = cols[1].parse().map_err(|_| bad("label is not an integer"))?;
        let seed = cols[2].parse().map_err(|_| bad("seed is not an integer"))?;
        out.push(ManifestEntry {
            path: base.join(cols[0]),
            label,
            seed,
        });
    }
    Ok(out)
}
