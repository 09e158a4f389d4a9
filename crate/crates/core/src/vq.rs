//! Patch vector quantizer: k-means codebook, nearest-codeword encode, and
//! codeword-pasting decode.

use std::collections::HashSet;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed;
use crate::video::Image;

/// `K` codewords over `patch_h × patch_w × channels` patches in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeBook {
    k: usize,
    patch_h: usize,
    patch_w: usize,
    channels: usize,
    codewords: Vec<f64>,
}

/// Row-major grid of codeword indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub codebook: CodeBook,
    /// Inertia after the initial assignment and after every iteration.
    pub inertia: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl CodeBook {
    pub fn new(
        k: usize,
        patch_h: usize,
        patch_w: usize,
        channels: usize,
        codewords: Vec<f64>,
    ) -> Result<Self> {
        if k == 0 || patch_h == 0 || patch_w == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "codebook extents must be positive (K={k}, patch {patch_h}x{patch_w}x{channels})"
            )));
        }
        if codewords.len() != k * patch_h * patch_w * channels {
            return Err(Error::Shape(format!(
                "{k} codewords of length {} need {} values, got {}",
                patch_h * patch_w * channels,
                k * patch_h * patch_w * channels,
                codewords.len()
            )));
        }
        Ok(Self {
            k,
            patch_h,
            patch_w,
            channels,
            codewords,
        })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn patch_h(&self) -> usize {
        self.patch_h
    }

    pub fn patch_w(&self) -> usize {
        self.patch_w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn patch_len(&self) -> usize {
        self.patch_h * self.patch_w * self.channels
    }

    pub fn codewords(&self) -> &[f64] {
        &self.codewords
    }

    pub fn codeword(&self, i: usize) -> &[f64] {
        let n = self.patch_len();
        &self.codewords[i * n..(i + 1) * n]
    }

    /// Index of the nearest codeword by squared distance; ties go to the
    /// lowest index.
    pub fn nearest(&self, patch: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.k {
            let d = sq_dist(patch, self.codeword(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    fn check_image(&self, img: &Image) -> Result<(usize, usize)> {
        let (h, w, c) = img.dims();
        if c != self.channels || h % self.patch_h != 0 || w % self.patch_w != 0 {
            return Err(Error::Shape(format!(
                "{h}x{w}x{c} image is not divisible into {}x{}x{} patches",
                self.patch_h, self.patch_w, self.channels
            )));
        }
        Ok((h / self.patch_h, w / self.patch_w))
    }
}

/// Normalized patch at token position `(r, c)`.
fn patch_at(img: &Image, r: usize, c: usize, ph: usize, pw: usize, out: &mut Vec<f64>) {
    out.clear();
    let ch = img.channels();
    for y in 0..ph {
        let row = ((r * ph + y) * img.width() + c * pw) * ch;
        out.extend(img.data()[row..row + pw * ch].iter().map(|&v| v as f64 / 255.0));
    }
}

fn raw_patch(img: &Image, r: usize, c: usize, ph: usize, pw: usize) -> Vec<u8> {
    let ch = img.channels();
    let mut out = Vec::with_capacity(ph * pw * ch);
    for y in 0..ph {
        let row = ((r * ph + y) * img.width() + c * pw) * ch;
        out.extend_from_slice(&img.data()[row..row + pw * ch]);
    }
    out
}

/// Maps every patch to its nearest codeword.
pub fn encode(img: &Image, cb: &CodeBook) -> Result<TokenGrid> {
    let (rows, cols) = cb.check_image(img)?;
    let mut ids = Vec::with_capacity(rows * cols);
    let mut buf = Vec::with_capacity(cb.patch_len());
    for r in 0..rows {
        for c in 0..cols {
            patch_at(img, r, c, cb.patch_h, cb.patch_w, &mut buf);
            ids.push(cb.nearest(&buf) as u32);
        }
    }
    Ok(TokenGrid { rows, cols, ids })
}

/// Pastes codewords back at their patch locations.
pub fn decode(tokens: &TokenGrid, cb: &CodeBook) -> Result<Image> {
    if tokens.ids.len() != tokens.rows * tokens.cols {
        return Err(Error::Shape(format!(
            "token grid {}x{} holds {} ids",
            tokens.rows,
            tokens.cols,
            tokens.ids.len()
        )));
    }
    if let Some(&bad) = tokens.ids.iter().find(|&&i| i as usize >= cb.k) {
        return Err(Error::Index(format!("token id {bad} >= codebook size {}", cb.k)));
    }
    let (ph, pw, ch) = (cb.patch_h, cb.patch_w, cb.channels);
    let (h, w) = (tokens.rows * ph, tokens.cols * pw);
    let mut data = vec![0u8; h * w * ch];
    for r in 0..tokens.rows {
        for c in 0..tokens.cols {
            let cw = cb.codeword(tokens.ids[r * tokens.cols + c] as usize);
            for y in 0..ph {
                let dst = ((r * ph + y) * w + c * pw) * ch;
                for (d, &v) in data[dst..dst + pw * ch].iter_mut().zip(&cw[y * pw * ch..(y + 1) * pw * ch]) {
                    *d = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    Image::new(h, w, ch, data)
}

/// Peak signal-to-noise ratio in dB for 8-bit images; identical images give
/// the sentinel 99.0.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "psnr: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    if se == 0.0 {
        return Ok(99.0);
    }
    let mse = se / a.data().len() as f64;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// k-means over all patches of `images` with seeded k-means++ seeding and a
/// fixed number of Lloyd iterations.
pub fn fit_codebook(
    images: &[Image],
    k: usize,
    patch_h: usize,
    patch_w: usize,
    iters: usize,
    seed: u64,
) -> Result<FitReport> {
    let first = images
        .first()
        .ok_or_else(|| Error::Domain("fit_codebook: no images".into()))?;
    if k == 0 {
        return Err(Error::Domain("fit_codebook: K must be positive".into()));
    }
    let channels = first.channels();
    let probe = CodeBook::new(1, patch_h, patch_w, channels, vec![0.0; patch_h * patch_w * channels])?;
    let mut patches: Vec<f64> = Vec::new();
    let mut distinct: HashSet<Vec<u8>> = HashSet::new();
    let mut buf = Vec::new();
    for img in images {
        let (rows, cols) = probe.check_image(img)?;
        for r in 0..rows {
            for c in 0..cols {
                if distinct.len() < k {
                    distinct.insert(raw_patch(img, r, c, patch_h, patch_w));
                }
                patch_at(img, r, c, patch_h, patch_w, &mut buf);
                patches.extend_from_slice(&buf);
            }
        }
    }
    if distinct.len() < k {
        return Err(Error::Domain(format!(
            "fit_codebook: only {} distinct patches available for K={k}",
            distinct.len()
        )));
    }
    let dim = patch_h * patch_w * channels;
    let n = patches.len() / dim;
    let point = |i: usize| &patches[i * dim..(i + 1) * dim];

    // k-means++ seeding.
    let mut rng = seed::rng(seed);
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    centers.extend_from_slice(point(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centers[..dim])).collect();
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            if d2[pick] == 0.0 {
                // Rounding pushed us onto a covered point; take the farthest.
                pick = argmax(&d2);
            }
            pick
        } else {
            argmax(&d2)
        };
        let start = centers.len();
        centers.extend_from_slice(point(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &centers[start..start + dim]));
        }
    }

    let mut cb = CodeBook::new(k, patch_h, patch_w, channels, centers)?;
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let assign_all = |cb: &CodeBook, assign: &mut [usize], dist: &mut [f64]| -> f64 {
        let mut inertia = 0.0;
        for i in 0..n {
            let a = cb.nearest(point(i));
            assign[i] = a;
            dist[i] = sq_dist(point(i), cb.codeword(a));
            inertia += dist[i];
        }
        inertia
    };
    let mut inertia = vec![assign_all(&cb, &mut assign, &mut dist)];
    for _ in 0..iters {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let a = assign[i];
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (c, s) in cb.codewords[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = s * inv;
                }
            }
        }
        // Empty clusters move onto the patch currently worst served.
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let far = argmax(&dist);
            cb.codewords[j * dim..(j + 1) * dim].copy_from_slice(point(far));
            dist[far] = 0.0;
        }
        inertia.push(assign_all(&cb, &mut assign, &mut dist));
    }
    dedupe_codewords(&mut cb, &patches, dim);
    Ok(FitReport {
        codebook: cb,
        inertia,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Replaces bitwise-duplicate codewords with the patch farthest from the
/// current codebook.
fn dedupe_codewords(cb: &mut CodeBook, patches: &[f64], dim: usize) {
    let key = |w: &[f64]| w.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    loop {
        let mut seen = HashSet::new();
        let dup = (0..cb.k).find(|&j| !seen.insert(key(cb.codeword(j))));
        let Some(j) = dup else { return };
        let n = patches.len() / dim;
        let far = (0..n)
            .map(|i| {
                let p = &patches[i * dim..(i + 1) * dim];
                (0..cb.k).map(|c| sq_dist(p, cb.codeword(c))).fold(f64::INFINITY, f64::min)
            })
            .collect::<Vec<_>>();
        let pick = argmax(&far);
        if far[pick] == 0.0 {
            return;
        }
        cb.codewords[j * dim..(j + 1) * dim].copy_from_slice(&patches[pick * dim..(pick + 1) * dim]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book(words: &[&[f64]], ph: usize, pw: usize) -> CodeBook {
        CodeBook::new(words.len(), ph, pw, 1, words.concat()).unwrap()
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let mut words: Vec<Vec<f64>> = (0..8).map(|i| vec![0.1 * i as f64 + 0.05]).collect();
        words[3] = vec![0.2];
        words[7] = vec![0.2];
        let refs: Vec<&[f64]> = words.iter().map(|w| w.as_slice()).collect();
        let cb = book(&refs, 1, 1);
        // 0.2 is exactly codeword 3 and 7.
        assert_eq!(cb.nearest(&[0.2]), 3);
    }

    #[test]
    fn codeword_image_round_trips() {
        let a = [0.0, 1.0, 51.0 / 255.0, 1.0];
        let b = [102.0 / 255.0; 4];
        let cb = book(&[&a, &b], 2, 2);
        let tokens = TokenGrid {
            rows: 2,
            cols: 3,
            ids: vec![0, 1, 1, 1, 0, 0],
        };
        let img = decode(&tokens, &cb).unwrap();
        assert_eq!(img.dims(), (4, 6, 1));
        assert_eq!(encode(&img, &cb).unwrap(), tokens);
        assert_eq!(decode(&encode(&img, &cb).unwrap(), &cb).unwrap(), img);
    }

    #[test]
    fn all_same_id_tiles_one_codeword() {
        let cb = book(&[&[0.0, 1.0], &[1.0, 0.0]], 1, 2);
        let img = decode(&TokenGrid { rows: 2, cols: 2, ids: vec![1; 4] }, &cb).unwrap();
        assert_eq!(img.data(), &[255, 0, 255, 0, 255, 0, 255, 0]);
    }

    #[test]
    fn decode_rejects_bad_id_and_encode_bad_dims() {
        let cb = book(&[&[0.0; 4]], 2, 2);
        let bad = TokenGrid { rows: 1, cols: 1, ids: vec![1] };
        assert!(matches!(decode(&bad, &cb), Err(Error::Index(_))));
        let img = Image::filled(3, 4, 1, 0).unwrap();
        assert!(matches!(encode(&img, &cb), Err(Error::Shape(_))));
    }

    #[test]
    fn psnr_values() {
        let a = Image::filled(4, 4, 1, 10).unwrap();
        let b = Image::filled(4, 4, 1, 11).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        assert!((psnr(&a, &b).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - 48.13).abs() < 0.01);
        let c = Image::filled(4, 5, 1, 0).unwrap();
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn single_cluster_is_global_mean() {
        let img = Image::new(2, 4, 1, vec![0, 10, 20, 30, 40, 50, 60, 70]).unwrap();
        let fit = fit_codebook(&[img], 1, 2, 2, 5, 1).unwrap();
        let want = [
            (0.0 + 20.0) / 2.0 / 255.0,
            (10.0 + 30.0) / 2.0 / 255.0,
            (40.0 + 60.0) / 2.0 / 255.0,
            (50.0 + 70.0) / 2.0 / 255.0,
        ];
        for (g, w) in fit.codebook.codewords().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_distinct_patches() {
        let img = Image::filled(4, 4, 1, 9).unwrap();
        assert!(matches!(fit_codebook(&[img], 2, 2, 2, 3, 0), Err(Error::Domain(_))));
    }
}
