use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const CLIP_MAGIC: &[u8; 4] = b"CLP1";
const HEADER_LEN: usize = 16;

/// A single-channel clip of `t` frames, each `h x w`, stored t-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Clip {
    pub fn new(t: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != t * h * w || t == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "clip of {t}x{h}x{w} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Clip { t, h, w, data })
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[i * n..(i + 1) * n]
    }

    /// New clip made of the listed frames, in order.
    pub fn select(&self, frames: &[usize]) -> Clip {
        let data = frames
            .iter()
            .flat_map(|&i| self.frame(i).iter().copied())
            .collect();
        Clip {
            t: frames.len(),
            h: self.h,
            w: self.w,
            data,
        }
    }
}

/// Serializes a clip: magic, `T, H, W` as little-endian u32, then f32 values.
pub fn encode_clip(clip: &Clip) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * clip.data.len());
    out.extend_from_slice(CLIP_MAGIC);
    for d in [clip.t, clip.h, clip.w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &clip.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_clip(bytes: &[u8], origin: &Path) -> Result<Clip> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "{}: clip header needs {HEADER_LEN} bytes, file has {}",
            origin.display(),
            bytes.len()
        )));
    }
    if &bytes[..4] != CLIP_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad clip magic {:?}, expected \"CLP1\"",
            origin.display(),
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let dim =
        |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (t, h, w) = (dim(0), dim(1), dim(2));
    let expected = HEADER_LEN + 4 * t * h * w;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: clip {t}x{h}x{w} needs {expected} bytes, file has {}",
            origin.display(),
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Clip::new(t, h, w, data).map_err(|e| Error::Format(format!("{}: {e}", origin.display())))
}

pub fn write_clip(path: &Path, clip: &Clip) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_clip(clip))
        .map_err(|e| Error::io(path, e))
}

pub fn load_clip(path: &Path) -> Result<Clip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_clip(&bytes, path)
}

/// Keeps frames 0, 2, 4, ...
pub fn temporal_downsample(clip: &Clip) -> Clip {
    let keep: Vec<usize> = (0..clip.t).step_by(2).collect();
    clip.select(&keep)
}
