//! Feature-level fusion of per-source maps into one vector `g` of width `C`.
//!
//! [`MapFuser`] covers Sum, Conv, SE and AFF, which map `M` feature maps to one
//! map that is then average-pooled. [`MhsaFusion`] turns the maps into a patch
//! sequence, adds source and positional embeddings, optionally masks patches,
//! runs transformer encoder blocks and sums the attended patches.
//! [`Fusion`] composes either kind in one step or in two steps (per view, then
//! across views).

mod maps;
mod mhsa;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SourceTag, View};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session};
use crate::tensor::Var;

pub use maps::{fuse_sum, pool_flatten, MapFuser, PointwiseConv};
pub use mhsa::{
    embed_patches, mask_count, mask_patches, patchify, unpatchify, MhsaFusion, PatchMeta,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionKind {
    Sum,
    Conv,
    #[serde(rename = "SE")]
    Se,
    #[serde(rename = "AFF")]
    Aff,
    #[serde(rename = "MHSA")]
    Mhsa,
}

impl FusionKind {
    pub const ALL: [FusionKind; 5] = [
        FusionKind::Sum,
        FusionKind::Conv,
        FusionKind::Se,
        FusionKind::Aff,
        FusionKind::Mhsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Sum => "Sum",
            FusionKind::Conv => "Conv",
            FusionKind::Se => "SE",
            FusionKind::Aff => "AFF",
            FusionKind::Mhsa => "MHSA",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown fusion kind {s:?}; valid kinds: Sum, Conv, SE, AFF, MHSA"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionSteps {
    OneStep,
    TwoStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MhsaConfig {
    pub heads: usize,
    /// Encoder blocks per fusion stage.
    pub blocks: usize,
}

impl Default for MhsaConfig {
    fn default() -> Self {
        MhsaConfig {
            heads: 4,
            blocks: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeConfig {
    pub rho: usize,
}

impl Default for SeConfig {
    fn default() -> Self {
        SeConfig { rho: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub kind: FusionKind,
    pub steps: FusionSteps,
    pub mask_ratio: f64,
    pub mhsa: MhsaConfig,
    pub se: SeConfig,
    /// Divide SE/AFF gates by their sum over sources.
    pub weight_normalization: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            kind: FusionKind::Mhsa,
            steps: FusionSteps::OneStep,
            mask_ratio: 0.0,
            mhsa: MhsaConfig::default(),
            se: SeConfig::default(),
            weight_normalization: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.9).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio {} outside [0, 0.9]",
                self.mask_ratio
            )));
        }
        if self.mhsa.heads == 0 || self.mhsa.blocks == 0 {
            return Err(Error::Config(
                "MHSA needs at least one head and one block".into(),
            ));
        }
        if self.se.rho == 0 {
            return Err(Error::Config("reduction ratio rho must be positive".into()));
        }
        Ok(())
    }
}

/// Patch masking applied inside MHSA fusion.
pub enum Masking<'a> {
    /// Every patch survives.
    Off,
    /// Drop `floor(ratio * L)` patches uniformly at random.
    Random { ratio: f64, rng: &'a mut ChaCha8Rng },
    /// Drop every patch of the flagged sources (indexed like the run's source list).
    Collapse(&'a [bool]),
}

#[derive(Debug, Clone, PartialEq)]
enum Stage {
    Maps(MapFuser),
    Mhsa(MhsaFusion),
}

#[derive(Debug, Clone, PartialEq)]
struct Group {
    /// Indices into the run's source list.
    members: Vec<usize>,
    stage: Stage,
}

/// A complete fusion head for a fixed source list and feature geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    kind: FusionKind,
    steps: FusionSteps,
    geometry: [usize; 4],
    num_sources: usize,
    groups: Vec<Group>,
    second: Option<Stage>,
}

fn make_stage<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    cfg: &FusionConfig,
    num_maps: usize,
    geometry: [usize; 4],
    rng: &mut R,
) -> Result<Stage> {
    Ok(match cfg.kind {
        FusionKind::Mhsa => Stage::Mhsa(MhsaFusion::new(
            store,
            name,
            num_maps,
            geometry,
            cfg.mhsa.heads,
            cfg.mhsa.blocks,
            rng,
        )?),
        kind => Stage::Maps(MapFuser::new(
            store,
            name,
            kind,
            num_maps,
            geometry[0],
            cfg.se.rho,
            cfg.weight_normalization,
            rng,
        )?),
    })
}

impl Fusion {
    /// `geometry` is the backbone output `[C, T, H, W]`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &FusionConfig,
        sources: &[SourceTag],
        geometry: [usize; 4],
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let m = sources.len();
        let (groups, second) = match cfg.steps {
            FusionSteps::OneStep => {
                let stage = make_stage(store, "fusion", cfg, m, geometry, rng)?;
                (
                    vec![Group {
                        members: (0..m).collect(),
                        stage,
                    }],
                    None,
                )
            }
            FusionSteps::TwoStep => {
                let mut views: Vec<View> = Vec::new();
                for t in sources {
                    if !views.contains(&t.view) {
                        views.push(t.view);
                    }
                }
                if views.len() < 2 {
                    return Err(Error::Config(
                        "two-step fusion needs sources from both views".into(),
                    ));
                }
                let mut groups = Vec::new();
                for v in views {
                    let members: Vec<usize> = (0..m).filter(|&i| sources[i].view == v).collect();
                    let stage = make_stage(
                        store,
                        &format!("fusion.{v}"),
                        cfg,
                        members.len(),
                        geometry,
                        rng,
                    )?;
                    groups.push(Group { members, stage });
                }
                let n = groups.len();
                let second = make_stage(store, "fusion.views", cfg, n, geometry, rng)?;
                (groups, Some(second))
            }
        };
        Ok(Fusion {
            kind: cfg.kind,
            steps: cfg.steps,
            geometry,
            num_sources: m,
            groups,
            second,
        })
    }

    pub fn kind(&self) -> FusionKind {
        self.kind
    }

    pub fn steps(&self) -> FusionSteps {
        self.steps
    }

    /// Width of the fused vector.
    pub fn width(&self) -> usize {
        self.geometry[0]
    }

    /// Fuses `maps` (one per source, in source-list order) into `g`.
    pub fn forward(&self, s: &mut Session, maps: &[Var], masking: Masking) -> Result<Var> {
        if maps.len() != self.num_sources {
            return Err(Error::Contract(format!(
                "fusion built for {} sources received {} maps",
                self.num_sources,
                maps.len()
            )));
        }
        let shape = maps::uniform_shape(s, maps)?;
        if shape != self.geometry {
            return Err(Error::Dimension(format!(
                "fusion built for maps of {:?} received {shape:?}",
                self.geometry
            )));
        }
        match self.kind {
            FusionKind::Mhsa => self.forward_mhsa(s, maps, masking),
            _ => {
                if matches!(masking, Masking::Collapse(_)) {
                    return Err(Error::Contract(format!(
                        "source collapse by patch dropping needs MHSA fusion, not {}",
                        self.kind
                    )));
                }
                self.forward_maps(s, maps)
            }
        }
    }

    fn forward_maps(&self, s: &mut Session, maps: &[Var]) -> Result<Var> {
        let mut fused = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let Stage::Maps(f) = &g.stage else {
                unreachable!("map fusion groups hold map fusers")
            };
            let members: Vec<Var> = g.members.iter().map(|&i| maps[i]).collect();
            fused.push(f.fuse(s, &members)?);
        }
        let map = match &self.second {
            None => fused[0],
            Some(Stage::Maps(f)) => f.fuse(s, &fused)?,
            Some(Stage::Mhsa(_)) => unreachable!("second stage matches the first"),
        };
        pool_flatten(s, map)
    }

    fn forward_mhsa(&self, s: &mut Session, maps: &[Var], mut masking: Masking) -> Result<Var> {
        let mut view_maps = Vec::new();
        let mut view_slots = Vec::new();
        for (gi, g) in self.groups.iter().enumerate() {
            let Stage::Mhsa(f) = &g.stage else {
                unreachable!("MHSA groups hold MHSA stages")
            };
            let members: Vec<Var> = g.members.iter().map(|&i| maps[i]).collect();
            let slots: Vec<usize> = (0..members.len()).collect();
            let (q, meta) = f.tokens(s, &members, &slots)?;
            let keep: Vec<usize> = match &mut masking {
                Masking::Off => (0..meta.len()).collect(),
                Masking::Random { ratio, rng } => {
                    mask_patches(meta.len(), *ratio, &mut **rng, true)?
                }
                Masking::Collapse(flags) => {
                    if flags.len() != self.num_sources {
                        return Err(Error::Contract(format!(
                            "collapse flags for {} sources, fusion has {}",
                            flags.len(),
                            self.num_sources
                        )));
                    }
                    meta.iter()
                        .enumerate()
                        .filter(|(_, pm)| !flags[g.members[pm.source]])
                        .map(|(k, _)| k)
                        .collect()
                }
            };
            if keep.is_empty() {
                continue;
            }
            let (q, meta) = if keep.len() == meta.len() {
                (q, meta)
            } else {
                let kept_meta = keep.iter().map(|&k| meta[k]).collect();
                (s.tape.gather_rows(q, &keep)?, kept_meta)
            };
            let u = f.attend(s, q)?;
            if self.second.is_none() {
                return MhsaFusion::sum_tokens(s, u);
            }
            view_maps.push(f.scatter_to_map(s, u, &meta)?);
            view_slots.push(gi);
        }
        let Some(Stage::Mhsa(f2)) = &self.second else {
            return Err(Error::Contract("every source was collapsed".into()));
        };
        if view_maps.is_empty() {
            return Err(Error::Contract("every source was collapsed".into()));
        }
        let (q, _) = f2.tokens(s, &view_maps, &view_slots)?;
        let u = f2.attend(s, q)?;
        MhsaFusion::sum_tokens(s, u)
    }
}
