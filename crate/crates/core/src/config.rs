//! The run description shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{validate_sources, SourceTag, SynthConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::sumoco::{OptimizerConfig, SuMoCoConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Side of the square frames fed to the backbones after augmentation.
    pub input_size: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            test: None,
            input_size: 32,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub collapse_counts: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            collapse_counts: vec![0, 1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub sources: Vec<SourceTag>,
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub sumoco: SuMoCoConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            sources: SourceTag::all(),
            backbone: BackboneConfig::default(),
            fusion: FusionConfig::default(),
            sumoco: SuMoCoConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        validate_sources(&self.sources)?;
        self.backbone.validate()?;
        self.fusion.validate()?;
        self.sumoco.validate()?;
        self.optimizer.validate()?;
        self.data.synth.validate()?;
        if self.optimizer.batch > self.sumoco.queue_capacity {
            return Err(Error::Config(format!(
                "batch {} exceeds queue capacity {}",
                self.optimizer.batch, self.sumoco.queue_capacity
            )));
        }
        self.input_geometry()?;
        let c = self.backbone.out_channels();
        if self.fusion.kind == crate::fusion::FusionKind::Mhsa
            && !c.is_multiple_of(self.fusion.mhsa.heads)
        {
            return Err(Error::Config(format!(
                "feature width {c} is not divisible by {} attention heads",
                self.fusion.mhsa.heads
            )));
        }
        Ok(())
    }

    /// Backbone output `[C, T, H, W]` for the 8-frame network input.
    pub fn input_geometry(&self) -> Result<[usize; 4]> {
        let s = self.data.input_size;
        self.backbone
            .output_shape([crate::data::CLIP_FRAMES, s, s])
            .map_err(|e| Error::Config(format!("input size {s}: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
