//! Grid-frame patterning: frames ↔ one composite grid image ↔ token order.
//!
//! Frame `t` occupies grid cell `(t / grid_cols, t % grid_cols)`. The AR model
//! reads tokens of the composite image in raster order, so a run of
//! `frame_tok_cols` consecutive positions always lies inside one frame while
//! neighbouring frames sit side by side in the sequence.

use crate::error::{Error, Result};
use crate::video::Image;
use crate::vq::TokenGrid;

/// Geometry tying frames, grid image and sequence positions together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenLayout {
    pub frames: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub frame_tok_rows: usize,
    pub frame_tok_cols: usize,
}

/// How the tokens of a clip are serialized for the AR model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum TokenOrder {
    /// Raster order over the composite grid image.
    #[default]
    GridRaster,
    /// Frame after frame, each in raster order (the non-grid baseline).
    FrameMajor,
}

impl TokenOrder {
    pub fn name(self) -> &'static str {
        match self {
            TokenOrder::GridRaster => "grid",
            TokenOrder::FrameMajor => "frame-major",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(TokenOrder::GridRaster),
            "frame-major" => Ok(TokenOrder::FrameMajor),
            _ => Err(Error::Config(format!(
                "unknown token order {s:?} (expected grid or frame-major)"
            ))),
        }
    }
}

/// Most square `rows × cols` grid with `rows · cols == frames`, `rows ≤ cols`.
pub fn default_grid(frames: usize) -> (usize, usize) {
    let mut rows = (frames as f64).sqrt().floor() as usize;
    while rows > 1 && frames % rows != 0 {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, frames / rows)
}

impl TokenLayout {
    pub fn new(
        frames: usize,
        grid_rows: usize,
        grid_cols: usize,
        frame_tok_rows: usize,
        frame_tok_cols: usize,
    ) -> Result<Self> {
        if [frames, grid_rows, grid_cols, frame_tok_rows, frame_tok_cols].contains(&0) {
            return Err(Error::Shape("token layout extents must be positive".into()));
        }
        if frames != grid_rows * grid_cols {
            return Err(Error::Shape(format!(
                "{frames} frames do not exactly fill a {grid_rows}x{grid_cols} grid"
            )));
        }
        Ok(Self {
            frames,
            grid_rows,
            grid_cols,
            frame_tok_rows,
            frame_tok_cols,
        })
    }

    /// Layout for `frames` frames of `height × width` pixels cut into
    /// `patch × patch` tokens, on the default grid.
    pub fn for_clip(frames: usize, height: usize, width: usize, patch_h: usize, patch_w: usize) -> Result<Self> {
        if patch_h == 0 || patch_w == 0 || height % patch_h != 0 || width % patch_w != 0 {
            return Err(Error::Shape(format!(
                "{height}x{width} frames are not divisible into {patch_h}x{patch_w} patches"
            )));
        }
        let (gr, gc) = default_grid(frames);
        Self::new(frames, gr, gc, height / patch_h, width / patch_w)
    }

    /// Tokens per frame.
    pub fn tokens_per_frame(&self) -> usize {
        self.frame_tok_rows * self.frame_tok_cols
    }

    /// Total tokens per clip.
    pub fn seq_len(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    /// Token-grid extents of the composite image.
    pub fn grid_tokens(&self) -> (usize, usize) {
        (
            self.grid_rows * self.frame_tok_rows,
            self.grid_cols * self.frame_tok_cols,
        )
    }

    /// Sequence position of token `(r, c)` of frame `t` in grid-raster order.
    pub fn seq_pos(&self, t: usize, r: usize, c: usize) -> Result<usize> {
        if t >= self.frames || r >= self.frame_tok_rows || c >= self.frame_tok_cols {
            return Err(Error::Index(format!(
                "(t={t}, r={r}, c={c}) outside layout with T={}, {}x{} tokens/frame",
                self.frames, self.frame_tok_rows, self.frame_tok_cols
            )));
        }
        let row = (t / self.grid_cols) * self.frame_tok_rows + r;
        let col = (t % self.grid_cols) * self.frame_tok_cols + c;
        Ok(row * (self.grid_cols * self.frame_tok_cols) + col)
    }

    /// Inverse of [`seq_pos`](Self::seq_pos).
    pub fn frame_pos(&self, p: usize) -> Result<(usize, usize, usize)> {
        if p >= self.seq_len() {
            return Err(Error::Index(format!(
                "position {p} outside sequence of length {}",
                self.seq_len()
            )));
        }
        let width = self.grid_cols * self.frame_tok_cols;
        let (row, col) = (p / width, p % width);
        let t = (row / self.frame_tok_rows) * self.grid_cols + col / self.frame_tok_cols;
        Ok((t, row % self.frame_tok_rows, col % self.frame_tok_cols))
    }

    /// Serializes the token grid of a composite image in `order`.
    pub fn to_sequence(&self, grid: &TokenGrid, order: TokenOrder) -> Result<Vec<u32>> {
        if (grid.rows, grid.cols) != self.grid_tokens() {
            return Err(Error::Shape(format!(
                "token grid {}x{} does not match layout {:?}",
                grid.rows,
                grid.cols,
                self.grid_tokens()
            )));
        }
        Ok(match order {
            TokenOrder::GridRaster => grid.ids.clone(),
            TokenOrder::FrameMajor => (0..self.seq_len())
                .map(|q| {
                    let (t, rc) = (q / self.tokens_per_frame(), q % self.tokens_per_frame());
                    let p = self
                        .seq_pos(t, rc / self.frame_tok_cols, rc % self.frame_tok_cols)
                        .expect("in range");
                    grid.ids[p]
                })
                .collect(),
        })
    }

    /// Inverse of [`to_sequence`](Self::to_sequence).
    pub fn from_sequence(&self, seq: &[u32], order: TokenOrder) -> Result<TokenGrid> {
        if seq.len() != self.seq_len() {
            return Err(Error::Shape(format!(
                "sequence of length {} for layout with S={}",
                seq.len(),
                self.seq_len()
            )));
        }
        let (rows, cols) = self.grid_tokens();
        let ids = match order {
            TokenOrder::GridRaster => seq.to_vec(),
            TokenOrder::FrameMajor => {
                let mut ids = vec![0; seq.len()];
                for (q, &id) in seq.iter().enumerate() {
                    let (t, rc) = (q / self.tokens_per_frame(), q % self.tokens_per_frame());
                    let p = self.seq_pos(t, rc / self.frame_tok_cols, rc % self.frame_tok_cols)?;
                    ids[p] = id;
                }
                ids
            }
        };
        Ok(TokenGrid { rows, cols, ids })
    }
}

/// Tiles `frames` row by row into a `grid_rows × grid_cols` composite image.
pub fn compose_grid(frames: &[Image], grid_rows: usize, grid_cols: usize) -> Result<Image> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Shape("compose_grid: no frames".into()))?;
    if frames.len() != grid_rows * grid_cols {
        return Err(Error::Shape(format!(
            "compose_grid: {} frames do not fill a {grid_rows}x{grid_cols} grid",
            frames.len()
        )));
    }
    let (h, w, c) = first.dims();
    if let Some(t) = frames.iter().position(|f| f.dims() != (h, w, c)) {
        return Err(Error::Shape(format!(
            "compose_grid: frame {t} has dims {:?}, expected {:?}",
            frames[t].dims(),
            (h, w, c)
        )));
    }
    let gw = grid_cols * w;
    let mut out = vec![0u8; grid_rows * h * gw * c];
    for (t, f) in frames.iter().enumerate() {
        let (gy, gx) = (t / grid_cols, t % grid_cols);
        for y in 0..h {
            let dst = ((gy * h + y) * gw + gx * w) * c;
            out[dst..dst + w * c].copy_from_slice(&f.data()[y * w * c..(y + 1) * w * c]);
        }
    }
    Image::new(grid_rows * h, gw, c, out)
}

/// Splits a composite image back into its frames, in temporal order.
pub fn decompose_grid(grid: &Image, grid_rows: usize, grid_cols: usize) -> Result<Vec<Image>> {
    let (gh, gw, c) = grid.dims();
    if grid_rows == 0 || grid_cols == 0 || gh % grid_rows != 0 || gw % grid_cols != 0 {
        return Err(Error::Shape(format!(
            "decompose_grid: {gh}x{gw} image does not split into a {grid_rows}x{grid_cols} grid"
        )));
    }
    let (h, w) = (gh / grid_rows, gw / grid_cols);
    let mut frames = Vec::with_capacity(grid_rows * grid_cols);
    for t in 0..grid_rows * grid_cols {
        let (gy, gx) = (t / grid_cols, t % grid_cols);
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            let src = ((gy * h + y) * gw + gx * w) * c;
            data.extend_from_slice(&grid.data()[src..src + w * c]);
        }
        frames.push(Image::new(h, w, c, data)?);
    }
    Ok(frames)
}

/// [`decompose_grid`] using the grid of `layout`, checking the token geometry.
pub fn decompose_with_layout(grid: &Image, layout: &TokenLayout) -> Result<Vec<Image>> {
    let (gh, gw, _) = grid.dims();
    let (tr, tc) = layout.grid_tokens();
    if gh % tr != 0 || gw % tc != 0 {
        return Err(Error::Shape(format!(
            "decompose_grid: {gh}x{gw} image inconsistent with {tr}x{tc} token grid"
        )));
    }
    decompose_grid(grid, layout.grid_rows, layout.grid_cols)
}
