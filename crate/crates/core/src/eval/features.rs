//! Fixed-length clip summaries for feature-space distances.

use crate::error::{Error, Result};
use crate::synthdata::{motion_stats, OracleThresholds};
use crate::video::VideoClip;
use crate::vq::{self, CodeBook};

/// Codebook-usage histogram bins (codewords pooled by brightness rank).
pub const USAGE_BINS: usize = 8;
/// Intensity statistics, inter-frame difference, motion statistics, usage.
pub const FEATURE_DIM: usize = 4 + 1 + 6 + USAGE_BINS;

/// Feature extractor bound to one codebook.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    codebook: CodeBook,
    /// Usage bin of each codeword.
    bin_of: Vec<usize>,
    thresholds: OracleThresholds,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl FeatureExtractor {
    pub fn new(codebook: CodeBook, thresholds: OracleThresholds) -> Self {
        let k = codebook.size();
        let brightness: Vec<f64> = (0..k)
            .map(|i| codebook.codeword(i).iter().sum::<f64>())
            .collect();
        let mut rank: Vec<usize> = (0..k).collect();
        rank.sort_by(|&a, &b| brightness[a].total_cmp(&brightness[b]).then(a.cmp(&b)));
        let mut bin_of = vec![0; k];
        for (r, &i) in rank.iter().enumerate() {
            bin_of[i] = r * USAGE_BINS / k;
        }
        Self {
            codebook,
            bin_of,
            thresholds,
        }
    }

    pub fn dim(&self) -> usize {
        FEATURE_DIM
    }

    /// Features of one clip. Intensities are scaled to `[0, 1]`.
    pub fn extract(&self, clip: &VideoClip) -> Result<Vec<f64>> {
        if clip.num_frames() < 2 {
            return Err(Error::Domain("features need at least 2 frames".into()));
        }
        let (h, w, _) = clip.frame_dims();
        let mut means = Vec::with_capacity(clip.num_frames());
        let mut vars = Vec::with_capacity(clip.num_frames());
        for f in clip.frames() {
            let vals: Vec<f64> = (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .map(|(y, x)| f.intensity(y, x) / 255.0)
                .collect();
            let (m, s) = mean_std(&vals);
            means.push(m);
            vars.push(s * s);
        }
        let (mean_m, std_m) = mean_std(&means);
        let (mean_v, std_v) = mean_std(&vars);
        let diff = super::temporal_consistency(clip)?;
        let ms = motion_stats(clip, &self.thresholds);
        let mut usage = [0.0; USAGE_BINS];
        let mut tokens = 0usize;
        for f in clip.frames() {
            let grid = vq::encode(f, &self.codebook)?;
            for &id in &grid.ids {
                usage[self.bin_of[id as usize]] += 1.0;
            }
            tokens += grid.ids.len();
        }
        let mut out = vec![
            mean_m,
            std_m,
            mean_v,
            std_v,
            diff,
            ms.mean_dx / w as f64,
            ms.mean_dy / h as f64,
            ms.mean_abs_dx / w as f64,
            ms.mean_abs_dy / h as f64,
            ms.mean_area_change,
            ms.mean_area,
        ];
        out.extend(usage.iter().map(|u| u / tokens as f64));
        debug_assert_eq!(out.len(), FEATURE_DIM);
        Ok(out)
    }

    pub fn extract_all(&self, clips: &[VideoClip]) -> Result<Vec<Vec<f64>>> {
        clips.iter().map(|c| self.extract(c)).collect()
    }
}
