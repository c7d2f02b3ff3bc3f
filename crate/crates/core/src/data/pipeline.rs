use rand::Rng;

use super::clip::{temporal_downsample, Clip};
use super::manifest::ClipSet;
use super::source::{SourceTag, View};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames spanned by one sampling window.
pub const WINDOW: usize = 32;
/// Frames kept from a window.
pub const CLIP_FRAMES: usize = 8;
pub const FRAME_STRIDE: usize = WINDOW / CLIP_FRAMES;
/// Crop area used at evaluation (the mean of the training crop range).
pub const EVAL_CROP_AREA: f64 = 0.9;
pub const CROP_AREA_RANGE: (f64, f64) = (0.8, 1.0);

pub fn window_indices(start: usize, offset: usize) -> [usize; CLIP_FRAMES] {
    std::array::from_fn(|k| start + offset + k * FRAME_STRIDE)
}

fn check_length(total: usize, id: &str) -> Result<()> {
    if total < WINDOW {
        return Err(Error::Data(format!(
            "sample {id} has {total} frames after downsampling, needs at least {WINDOW}"
        )));
    }
    Ok(())
}

/// Random start in `[0, total - 32]`, random phase in `{0, 1, 2, 3}`, stride 4.
pub fn sample_window<R: Rng + ?Sized>(
    total: usize,
    rng: &mut R,
    id: &str,
) -> Result<[usize; CLIP_FRAMES]> {
    check_length(total, id)?;
    let start = rng.random_range(0..=total - WINDOW);
    let offset = rng.random_range(0..FRAME_STRIDE);
    Ok(window_indices(start, offset))
}

/// Centered window with phase 0, used at evaluation.
pub fn eval_window(total: usize, id: &str) -> Result<[usize; CLIP_FRAMES]> {
    check_length(total, id)?;
    Ok(window_indices((total - WINDOW) / 2, 0))
}

/// One spatial transform: crop rectangle, optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialAug {
    pub top: usize,
    pub left: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub flip: bool,
}

fn crop_side(dim: usize, area: f64) -> usize {
    ((dim as f64 * area.sqrt()).round() as usize).clamp(1, dim)
}

impl SpatialAug {
    pub fn random<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Self {
        let area = rng.random_range(CROP_AREA_RANGE.0..=CROP_AREA_RANGE.1);
        let (ch, cw) = (crop_side(h, area), crop_side(w, area));
        SpatialAug {
            top: rng.random_range(0..=h - ch),
            left: rng.random_range(0..=w - cw),
            crop_h: ch,
            crop_w: cw,
            flip: rng.random_bool(0.5),
        }
    }

    pub fn center(h: usize, w: usize) -> Self {
        let (ch, cw) = (crop_side(h, EVAL_CROP_AREA), crop_side(w, EVAL_CROP_AREA));
        SpatialAug {
            top: (h - ch) / 2,
            left: (w - cw) / 2,
            crop_h: ch,
            crop_w: cw,
            flip: false,
        }
    }

    /// Crops, flips and resizes every frame of `clip` to `out_h x out_w`.
    pub fn apply(&self, clip: &Clip, out_h: usize, out_w: usize) -> Clip {
        let mut cropped = Vec::with_capacity(clip.t * self.crop_h * self.crop_w);
        for f in 0..clip.t {
            let frame = clip.frame(f);
            for y in self.top..self.top + self.crop_h {
                let row = &frame[y * clip.w + self.left..][..self.crop_w];
                if self.flip {
                    cropped.extend(row.iter().rev());
                } else {
                    cropped.extend_from_slice(row);
                }
            }
        }
        let c = Clip {
            t: clip.t,
            h: self.crop_h,
            w: self.crop_w,
            data: cropped,
        };
        resize_bilinear(&c, out_h, out_w)
    }
}

pub fn flip_horizontal(clip: &Clip) -> Clip {
    let data = clip
        .data
        .chunks(clip.w)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Clip {
        t: clip.t,
        h: clip.h,
        w: clip.w,
        data,
    }
}

/// Bilinear resampling with half-pixel centers; edges are clamped.
pub fn resize_bilinear(clip: &Clip, out_h: usize, out_w: usize) -> Clip {
    if clip.h == out_h && clip.w == out_w {
        return clip.clone();
    }
    let taps = |inp: usize, out: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = taps(clip.h, out_h);
    let xs = taps(clip.w, out_w);
    let mut data = Vec::with_capacity(clip.t * out_h * out_w);
    for f in 0..clip.t {
        let frame = clip.frame(f);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let a = frame[y0 * clip.w + x0] * (1.0 - fx) + frame[y0 * clip.w + x1] * fx;
                let b = frame[y1 * clip.w + x0] * (1.0 - fx) + frame[y1 * clip.w + x1] * fx;
                data.push(a * (1.0 - fy) + b * fy);
            }
        }
    }
    Clip {
        t: clip.t,
        h: out_h,
        w: out_w,
        data,
    }
}

/// Training: random crop/flip; evaluation: center crop. Resizes to `out x out`.
pub fn augment<R: Rng + ?Sized>(window: &Clip, rng: &mut R, training: bool, out: usize) -> Clip {
    let aug = if training {
        SpatialAug::random(window.h, window.w, rng)
    } else {
        SpatialAug::center(window.h, window.w)
    };
    aug.apply(window, out, out)
}

/// Draws (training) or centers (evaluation) one shared temporal window and cuts it
/// from every source's downsampled clip.
pub fn select_windows<R: Rng + ?Sized>(
    clips: &[Clip],
    rng: Option<&mut R>,
    id: &str,
) -> Result<Vec<Clip>> {
    let total = clips.iter().map(|c| c.t).min().unwrap_or(0);
    let idx = match rng {
        Some(r) => sample_window(total, r, id)?,
        None => eval_window(total, id)?,
    };
    Ok(clips.iter().map(|c| c.select(&idx)).collect())
}

/// Applies one spatial transform per view, shared by the modalities of that view,
/// and returns `1 x 8 x out x out` tensors in source order.
pub fn augment_views<R: Rng + ?Sized>(
    windows: &[Clip],
    tags: &[SourceTag],
    mut rng: Option<&mut R>,
    out: usize,
) -> Vec<Tensor> {
    let mut per_view: Vec<(View, SpatialAug)> = Vec::new();
    windows
        .iter()
        .zip(tags)
        .map(|(w, tag)| {
            let aug = match per_view.iter().find(|(v, _)| *v == tag.view) {
                Some((_, a)) => *a,
                None => {
                    let a = match rng.as_deref_mut() {
                        Some(r) => SpatialAug::random(w.h, w.w, r),
                        None => SpatialAug::center(w.h, w.w),
                    };
                    per_view.push((tag.view, a));
                    a
                }
            };
            let c = aug.apply(w, out, out);
            Tensor::new(vec![1, c.t, c.h, c.w], c.data).expect("clip dims match data")
        })
        .collect()
}

/// Loads and temporally downsamples sample `i` for each of `tags`.
pub fn load_sample(set: &ClipSet, i: usize, tags: &[SourceTag]) -> Result<Vec<Clip>> {
    tags.iter()
        .map(|&t| set.load(i, t).map(|c| temporal_downsample(&c)))
        .collect()
}

/// Deterministic evaluation input: centered window, center crop, `1 x 8 x out x out` per source.
pub fn eval_inputs(set: &ClipSet, i: usize, tags: &[SourceTag], out: usize) -> Result<Vec<Tensor>> {
    let clips = load_sample(set, i, tags)?;
    let windows = select_windows::<rand_chacha::ChaCha8Rng>(&clips, None, &set.sample(i).id)?;
    Ok(augment_views::<rand_chacha::ChaCha8Rng>(
        &windows, tags, None, out,
    ))
}
