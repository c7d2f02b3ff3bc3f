use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::clip::{write_clip, Clip};
use super::manifest::{ClipSet, Manifest, SampleEntry};
use super::source::{Modality, SourceTag, View};
use crate::error::{Error, Result};

const FAMILIES: [&str; 4] = ["horizontal", "vertical", "circle", "diagonal"];
const BANDS: [&str; 2] = ["upper", "lower"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Frames per clip after temporal downsampling; files hold twice as many.
    pub frames: usize,
    pub spatial: usize,
    pub normal_fraction: f64,
    pub noise_sigma: f64,
    pub cross_source_coupling: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 9,
            train_samples: 2000,
            test_samples: 500,
            frames: 32,
            spatial: 32,
            normal_fraction: 0.847,
            noise_sigma: 0.1,
            cross_source_coupling: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=9).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "synthetic set supports 2 to 9 classes, got {}",
                self.num_classes
            )));
        }
        if !(self.normal_fraction > 0.0 && self.normal_fraction < 1.0) {
            return Err(Error::Config(format!(
                "normal_fraction {} outside (0, 1)",
                self.normal_fraction
            )));
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return Err(Error::Config(
                "train and test sample counts must be positive".into(),
            ));
        }
        if self.frames < 32 {
            return Err(Error::Config(format!(
                "clips need at least 32 frames after downsampling, got {}",
                self.frames
            )));
        }
        if self.spatial < 4 {
            return Err(Error::Config(format!(
                "spatial size {} too small",
                self.spatial
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma {} invalid",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec!["normal".to_string()];
        names.extend(
            (1..self.num_classes)
                .map(|k| format!("{}_{}", FAMILIES[(k - 1) / 2], BANDS[(k - 1) % 2])),
        );
        names
    }

    /// Target probability of each class.
    pub fn class_fractions(&self) -> Vec<f64> {
        let rest = (1.0 - self.normal_fraction) / (self.num_classes - 1) as f64;
        let mut f = vec![rest; self.num_classes];
        f[0] = self.normal_fraction;
        f
    }
}

/// Train and test splits written by [`synth_generate`].
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: ClipSet,
    pub test: ClipSet,
}

/// Largest-remainder apportionment of `n` samples over `fractions`.
pub fn stratified_counts(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    counts
}

fn rng_for(seed: u64, split: u64, sample: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split << 56) | (sample << 8) | slot);
    rng
}

/// Blob path in normalized image coordinates, `u` in `[0, 1)` over the clip.
#[derive(Debug, Clone, Copy)]
enum Path2 {
    Oscillate {
        center: (f64, f64),
        dir: (f64, f64),
        amp: f64,
        freq: f64,
        phase: f64,
    },
    Circle {
        center: (f64, f64),
        radius: f64,
        freq: f64,
        phase: f64,
    },
    Drift {
        start: (f64, f64),
        vel: (f64, f64),
    },
}

impl Path2 {
    fn at(&self, u: f64) -> (f64, f64) {
        match *self {
            Path2::Oscillate {
                center,
                dir,
                amp,
                freq,
                phase,
            } => {
                let a = amp * (TAU * (freq * u + phase)).sin();
                (center.0 + a * dir.0, center.1 + a * dir.1)
            }
            Path2::Circle {
                center,
                radius,
                freq,
                phase,
            } => {
                let t = TAU * (freq * u + phase);
                (center.0 + radius * t.cos(), center.1 + radius * t.sin())
            }
            Path2::Drift { start, vel } => (start.0 + vel.0 * u, start.1 + vel.1 * u),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    path: Path2,
    amplitude: f64,
    sigma: f64,
}

/// Scene content of one view: a list of moving Gaussian blobs.
fn scene_for(label: usize, view: View, coupled: bool, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let jitter = |rng: &mut ChaCha8Rng, c: f64| c + rng.random_range(-0.05..0.05);
    let drift = |rng: &mut ChaCha8Rng, y: f64| Path2::Drift {
        start: (rng.random_range(0.25..0.75), y),
        vel: (rng.random_range(-0.3..0.3), rng.random_range(-0.05..0.05)),
    };
    if label == 0 {
        let y = rng.random_range(0.3..0.7);
        return vec![Blob {
            path: drift(rng, y),
            amplitude: rng.random_range(0.15..0.3),
            sigma: rng.random_range(0.1..0.16),
        }];
    }
    let family = (label - 1) / 2;
    let band = (label - 1) % 2;
    let freq = rng.random_range(0.6..1.2);
    let phase = rng.random_range(0.0..1.0);
    let center = (jitter(rng, 0.5), jitter(rng, 0.5));
    let trajectory = match family {
        0 => Path2::Oscillate {
            center,
            dir: (1.0, 0.0),
            amp: 0.28,
            freq,
            phase,
        },
        1 => Path2::Oscillate {
            center,
            dir: (0.0, 1.0),
            amp: 0.28,
            freq,
            phase,
        },
        2 => Path2::Circle {
            center,
            radius: 0.22,
            freq,
            phase,
        },
        _ => Path2::Oscillate {
            center,
            dir: (
                std::f64::consts::FRAC_1_SQRT_2,
                std::f64::consts::FRAC_1_SQRT_2,
            ),
            amp: 0.28,
            freq,
            phase,
        },
    };
    let band_y = jitter(rng, if band == 0 { 0.28 } else { 0.72 });
    let marker = drift(rng, band_y);
    let amplitude = rng.random_range(0.7..1.0);
    let sigma = rng.random_range(0.08..0.12);
    let primary = Blob {
        path: trajectory,
        amplitude,
        sigma,
    };
    let secondary = Blob {
        path: marker,
        amplitude,
        sigma,
    };
    match (coupled, view) {
        (true, View::Top) => vec![primary],
        (true, View::Front) => vec![secondary],
        (false, _) => vec![
            primary,
            Blob {
                sigma: sigma * 0.8,
                ..secondary
            },
        ],
    }
}

/// Renders scene intensity `s` in `[0, 1]` for `t` frames of `size x size`.
fn render_scene(blobs: &[Blob], t: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * size * size];
    for f in 0..t {
        let u = f as f64 / t as f64;
        let centers: Vec<(f64, f64)> = blobs.iter().map(|b| b.path.at(u)).collect();
        let frame = &mut out[f * size * size..(f + 1) * size * size];
        for i in 0..size {
            let y = (i as f64 + 0.5) / size as f64;
            for j in 0..size {
                let x = (j as f64 + 0.5) / size as f64;
                let mut v: f64 = 0.0;
                for (b, &(cx, cy)) in blobs.iter().zip(&centers) {
                    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                    v = v.max(b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp());
                }
                frame[i * size + j] = v;
            }
        }
    }
    out
}

/// Applies a modality's transfer function plus sensor noise and clamps to `[0, 1]`.
fn render_modality(
    scene: &[f64],
    size: usize,
    modality: Modality,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("sigma is finite and nonnegative");
    scene
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let p = k % (size * size);
            let x = ((p % size) as f64 + 0.5) / size as f64;
            let y = ((p / size) as f64 + 0.5) / size as f64;
            let base = match modality {
                Modality::Depth => {
                    let r2 = ((x - 0.5).powi(2) + (y - 0.5).powi(2)) / 0.5;
                    0.9 - 0.7 * s - 0.1 * r2
                }
                Modality::Ir => {
                    let hot = 0.1 * (-((x - 0.8).powi(2) + (y - 0.2).powi(2)) / 0.02).exp();
                    0.15 + 0.8 * s + hot
                }
            };
            let n = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            ((base.clamp(0.0, 1.0) + n).clamp(0.0, 1.0) as f32) as f64
        })
        .collect()
}

/// Renders all four sources of one sample; `raw_frames` is the on-disk length.
pub fn render_sample(
    cfg: &SynthConfig,
    split: u64,
    index: u64,
    label: usize,
) -> Vec<(SourceTag, Clip)> {
    let raw_frames = 2 * cfg.frames;
    let mut scene_rng = rng_for(cfg.seed, split, index, 0);
    let scenes: Vec<(View, Vec<f64>)> = [View::Top, View::Front]
        .into_iter()
        .map(|v| {
            let blobs = scene_for(label, v, cfg.cross_source_coupling, &mut scene_rng);
            (v, render_scene(&blobs, raw_frames, cfg.spatial))
        })
        .collect();
    SourceTag::all()
        .into_iter()
        .enumerate()
        .map(|(slot, tag)| {
            let scene = &scenes
                .iter()
                .find(|(v, _)| *v == tag.view)
                .expect("both views rendered")
                .1;
            let mut noise_rng = rng_for(cfg.seed, split, index, 1 + slot as u64);
            let data = render_modality(
                scene,
                cfg.spatial,
                tag.modality,
                cfg.noise_sigma,
                &mut noise_rng,
            );
            let clip =
                Clip::new(raw_frames, cfg.spatial, cfg.spatial, data).expect("rendered dims");
            (tag, clip)
        })
        .collect()
}

fn generate_split(
    cfg: &SynthConfig,
    dir: &Path,
    name: &str,
    split: u64,
    n: usize,
) -> Result<ClipSet> {
    let clips_dir = dir.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    let counts = stratified_counts(n, &cfg.class_fractions());
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
        .collect();
    labels.shuffle(&mut rng_for(cfg.seed, split, (1 << 40) - 1, 255));
    let samples = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let id = format!("{name}{i:05}");
            let mut files = BTreeMap::new();
            for (tag, clip) in render_sample(cfg, split, i as u64, label) {
                let rel = format!("clips/{id}.{tag}.clp");
                write_clip(&dir.join(&rel), &clip)?;
                files.insert(tag.to_string(), rel);
            }
            Ok(SampleEntry {
                id,
                label,
                frames: 2 * cfg.frames,
                files,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = ClipSet::new(
        dir,
        Manifest {
            version: 1,
            sources: SourceTag::all(),
            classes: cfg.class_names(),
            samples,
        },
    )?;
    set.write_manifest()?;
    Ok(set)
}

/// Writes `out/train` and `out/test`, each with a manifest and one clip per source.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<SynthOutput> {
    cfg.validate()?;
    let train = generate_split(cfg, &out.join("train"), "train", 1, cfg.train_samples)?;
    let test = generate_split(cfg, &out.join("test"), "test", 2, cfg.test_samples)?;
    Ok(SynthOutput { train, test })
}
