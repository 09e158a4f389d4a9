//! Little-endian binary file formats.
//!
//! * `.gfv` clip: `"GFV1"`, u32 `T, H, W, C, label`, then `T·H·W·C` bytes
//!   (frame-major, row-major, channel-interleaved).
//! * `.tok` token sequence: `"TOK1"`, u32 `seq_len, vocab, label`, then
//!   `seq_len` u32 ids.
//! * codebook: `"VQCB"`, u32 `K, patch_h, patch_w, channels`, then
//!   `K·patch_len` f64 values.
//!
//! Readers reject truncated and oversized payloads and report expected and
//! actual byte counts.

use std::path::Path;

use crate::error::{Error, Result};
use crate::video::{Image, VideoClip};
use crate::vq::CodeBook;

pub const CLIP_MAGIC: &[u8; 4] = b"GFV1";
pub const TOKEN_MAGIC: &[u8; 4] = b"TOK1";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"VQCB";

/// Cursor over a byte buffer that reports offsets in its errors.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, msg)
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated at offset {}: need {n} more bytes, {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.bytes(4)?;
        if got != want {
            return Err(self.err(format!(
                "bad magic at offset {at}: expected {:?}, found {:?}",
                String::from_utf8_lossy(want),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Checks that exactly `n` payload bytes remain.
    pub fn expect_remaining(&self, n: usize) -> Result<()> {
        let rest = self.buf.len() - self.pos;
        if rest != n {
            return Err(self.err(format!(
                "payload size mismatch after header at offset {}: expected {n} bytes, found {rest}",
                self.pos
            )));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        self.expect_remaining(0)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Shape(format!("{what} = {v} does not fit in u32")))
}

pub fn encode_clip(clip: &VideoClip) -> Result<Vec<u8>> {
    let (h, w, c) = clip.frame_dims();
    let t = clip.num_frames();
    let mut out = Vec::with_capacity(24 + t * h * w * c);
    out.extend_from_slice(CLIP_MAGIC);
    for v in [t, h, w, c] {
        out.extend_from_slice(&dim_u32(v, "clip extent")?.to_le_bytes());
    }
    out.extend_from_slice(&clip.label.to_le_bytes());
    for f in clip.frames() {
        out.extend_from_slice(f.data());
    }
    Ok(out)
}

pub fn decode_clip(bytes: &[u8], path: &Path) -> Result<VideoClip> {
    let mut r = Reader::new(bytes, path);
    r.magic(CLIP_MAGIC)?;
    let t = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    let label = r.u32()?;
    if t == 0 || h == 0 || w == 0 || c == 0 {
        return Err(r.err(format!("zero extent in header: T={t} H={h} W={w} C={c}")));
    }
    let frame_len = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| r.err("frame size overflow"))?;
    let total = frame_len
        .checked_mul(t)
        .ok_or_else(|| r.err("payload size overflow"))?;
    r.expect_remaining(total)?;
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        frames.push(Image::new(h, w, c, r.bytes(frame_len)?.to_vec())?);
    }
    VideoClip::new(frames, label, 0)
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    write_file(path, &encode_clip(clip)?)
}

pub fn read_clip(path: &Path) -> Result<VideoClip> {
    decode_clip(&read_file(path)?, path)
}

/// Contents of a `.tok` file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenFile {
    pub vocab: u32,
    pub label: u32,
    pub ids: Vec<u32>,
}

impl TokenFile {
    pub fn new(vocab: u32, label: u32, ids: Vec<u32>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index(format!("token id {bad} >= vocab {vocab}")));
        }
        Ok(Self { vocab, label, ids })
    }

    pub fn ids_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }
}

pub fn encode_tokens(tf: &TokenFile) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * tf.ids.len());
    out.extend_from_slice(TOKEN_MAGIC);
    out.extend_from_slice(&dim_u32(tf.ids.len(), "seq_len")?.to_le_bytes());
    out.extend_from_slice(&tf.vocab.to_le_bytes());
    out.extend_from_slice(&tf.label.to_le_bytes());
    for id in &tf.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tokens(bytes: &[u8], path: &Path) -> Result<TokenFile> {
    let mut r = Reader::new(bytes, path);
    r.magic(TOKEN_MAGIC)?;
    let n = r.u32()? as usize;
    let vocab = r.u32()?;
    let label = r.u32()?;
    r.expect_remaining(n * 4)?;
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        ids.push(r.u32()?);
    }
    TokenFile::new(vocab, label, ids).map_err(|e| r.err(e.to_string()))
}

pub fn write_tokens(path: &Path, tf: &TokenFile) -> Result<()> {
    write_file(path, &encode_tokens(tf)?)
}

pub fn read_tokens(path: &Path) -> Result<TokenFile> {
    decode_tokens(&read_file(path)?, path)
}

pub fn encode_codebook(cb: &CodeBook) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + 8 * cb.codewords().len());
    out.extend_from_slice(CODEBOOK_MAGIC);
    for v in [cb.size(), cb.patch_h(), cb.patch_w(), cb.channels()] {
        out.extend_from_slice(&dim_u32(v, "codebook extent")?.to_le_bytes());
    }
    for v in cb.codewords() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_codebook(bytes: &[u8], path: &Path) -> Result<CodeBook> {
    let mut r = Reader::new(bytes, path);
    r.magic(CODEBOOK_MAGIC)?;
    let k = r.u32()? as usize;
    let ph = r.u32()? as usize;
    let pw = r.u32()? as usize;
    let c = r.u32()? as usize;
    let n = k
        .checked_mul(ph)
        .and_then(|v| v.checked_mul(pw))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| r.err("codebook size overflow"))?;
    r.expect_remaining(n * 8)?;
    let values = r.f64s(n)?;
    CodeBook::new(k, ph, pw, c, values).map_err(|e| r.err(e.to_string()))
}

pub fn write_codebook(path: &Path, cb: &CodeBook) -> Result<()> {
    write_file(path, &encode_codebook(cb)?)
}

pub fn read_codebook(path: &Path) -> Result<CodeBook> {
    decode_codebook(&read_file(path)?, path)
}
