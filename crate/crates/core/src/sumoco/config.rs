use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which queue entries enter the softmax denominator of an (anchor, positive) term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DenominatorMode {
    /// The current positive plus every entry with a different label.
    PositivePlusNegatives,
    /// Only entries with a different label.
    NegativesOnly,
    /// Every queue entry.
    AllNonAnchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositiveNormalization {
    LiteralSum,
    MeanOverPositives,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Uniform,
    InverseFrequency,
}

/// Per-class focal weights: a named rule or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FocalAlpha {
    Mode(AlphaMode),
    Custom(Vec<f64>),
}

impl FocalAlpha {
    /// Resolves to one weight per class. Inverse frequency uses `N / (K * n_k)`,
    /// with absent classes weighted 1.
    pub fn weights(&self, num_classes: usize, labels: &[usize]) -> Result<Vec<f64>> {
        match self {
            FocalAlpha::Mode(AlphaMode::Uniform) => Ok(vec![1.0; num_classes]),
            FocalAlpha::Mode(AlphaMode::InverseFrequency) => {
                let mut counts = vec![0usize; num_classes];
                for &l in labels {
                    counts[l] += 1;
                }
                let n = labels.len() as f64;
                Ok(counts
                    .iter()
                    .map(|&c| {
                        if c == 0 {
                            1.0
                        } else {
                            n / (num_classes as f64 * c as f64)
                        }
                    })
                    .collect())
            }
            FocalAlpha::Custom(w) => {
                if w.len() != num_classes {
                    return Err(Error::Config(format!(
                        "focal_alpha lists {} weights for {num_classes} classes",
                        w.len()
                    )));
                }
                Ok(w.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuMoCoConfig {
    pub temperature: f64,
    pub momentum: f64,
    pub queue_capacity: usize,
    /// Width of the contrastive embedding `z`.
    pub embed_dim: usize,
    pub focal_gamma: f64,
    pub focal_alpha: FocalAlpha,
    pub denominator_mode: DenominatorMode,
    pub positive_normalization: PositiveNormalization,
}

impl Default for SuMoCoConfig {
    fn default() -> Self {
        SuMoCoConfig {
            temperature: 0.07,
            momentum: 0.999,
            queue_capacity: 16384,
            embed_dim: 32,
            focal_gamma: 2.0,
            focal_alpha: FocalAlpha::Mode(AlphaMode::Uniform),
            denominator_mode: DenominatorMode::PositivePlusNegatives,
            positive_normalization: PositiveNormalization::LiteralSum,
        }
    }
}

impl SuMoCoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1]",
                self.momentum
            )));
        }
        if self.queue_capacity == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "queue capacity and embedding width must be positive".into(),
            ));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::Config(format!(
                "focal_gamma {} must be >= 0",
                self.focal_gamma
            )));
        }
        if let FocalAlpha::Custom(w) = &self.focal_alpha {
            if w.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
                return Err(Error::Config(
                    "focal_alpha weights must be finite and >= 0".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub batch: usize,
    pub epochs: usize,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr0: 1e-3,
            batch: 32,
            epochs: 50,
            schedule: Schedule::Cosine,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 {} invalid", self.lr0)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(self.lr0, epoch, self.epochs),
            Schedule::Constant => self.lr0,
        }
    }
}

/// `lr0 * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(lr0: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos()) / 2.0
}
