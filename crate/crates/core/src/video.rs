//! 8-bit images and clips.

use crate::error::{Error, Result};

/// Row-major, channel-interleaved 8-bit image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image extents must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} bytes, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel-averaged intensity at `(y, x)`.
    pub fn intensity(&self, y: usize, x: usize) -> f64 {
        let base = (y * self.width + x) * self.channels;
        let s: u32 = self.data[base..base + self.channels]
            .iter()
            .map(|&v| v as u32)
            .sum();
        s as f64 / self.channels as f64
    }
}

/// `T` equally sized frames plus a class label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoClip {
    frames: Vec<Image>,
    pub label: u32,
    /// Generator seed, or 0 for clips read from disk.
    pub seed: u64,
}

impl VideoClip {
    pub fn new(frames: Vec<Image>, label: u32, seed: u64) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("a clip needs at least one frame".into()))?;
        let dims = first.dims();
        if let Some((t, f)) = frames.iter().enumerate().find(|(_, f)| f.dims() != dims) {
            return Err(Error::Shape(format!(
                "frame {t} has dims {:?}, frame 0 has {dims:?}",
                f.dims()
            )));
        }
        Ok(Self {
            frames,
            label,
            seed,
        })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Image> {
        self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// `(height, width, channels)` of every frame.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        self.frames[0].dims()
    }
}
