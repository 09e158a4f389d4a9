//! Clip ↔ token-sequence conversion through the grid image and codebook.

use crate::error::{Error, Result};
use crate::sgp::{compose_grid, decompose_with_layout, TokenLayout, TokenOrder};
use crate::video::VideoClip;
use crate::vq::{self, CodeBook};

/// Layout for clips shaped like `clip` under `codebook`'s patch size.
pub fn layout_for(clip: &VideoClip, codebook: &CodeBook) -> Result<TokenLayout> {
    let (h, w, c) = clip.frame_dims();
    if c != codebook.channels() {
        return Err(Error::Incompatible(format!(
            "clip has {c} channels, codebook expects {}",
            codebook.channels()
        )));
    }
    TokenLayout::for_clip(clip.num_frames(), h, w, codebook.patch_h(), codebook.patch_w())
}

/// Composes the grid image, quantizes it and serializes the tokens.
pub fn tokenize_clip(
    clip: &VideoClip,
    codebook: &CodeBook,
    layout: &TokenLayout,
    order: TokenOrder,
) -> Result<Vec<u32>> {
    if clip.num_frames() != layout.frames {
        return Err(Error::Shape(format!(
            "clip has {} frames, layout expects {}",
            clip.num_frames(),
            layout.frames
        )));
    }
    let grid = compose_grid(clip.frames(), layout.grid_rows, layout.grid_cols)?;
    let tokens = vq::encode(&grid, codebook)?;
    if (tokens.rows, tokens.cols) != layout.grid_tokens() {
        return Err(Error::Shape(format!(
            "grid image quantizes to {}x{} tokens, layout expects {:?}",
            tokens.rows,
            tokens.cols,
            layout.grid_tokens()
        )));
    }
    layout.to_sequence(&tokens, order)
}

/// Inverse of [`tokenize_clip`] up to quantization.
pub fn render_clip(
    ids: &[u32],
    codebook: &CodeBook,
    layout: &TokenLayout,
    order: TokenOrder,
    label: u32,
    seed: u64,
) -> Result<VideoClip> {
    let tokens = layout.from_sequence(ids, order)?;
    let grid = vq::decode(&tokens, codebook)?;
    let frames = decompose_with_layout(&grid, layout)?;
    VideoClip::new(frames, label, seed)
}
