use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Top,
    Front,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Depth,
    Ir,
}

/// One camera placement paired with one sensor type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceTag {
    pub view: View,
    pub modality: Modality,
}

impl SourceTag {
    pub const fn new(view: View, modality: Modality) -> Self {
        SourceTag { view, modality }
    }

    /// Top depth, top IR, front depth, front IR.
    pub fn all() -> Vec<SourceTag> {
        vec![
            SourceTag::new(View::Top, Modality::Depth),
            SourceTag::new(View::Top, Modality::Ir),
            SourceTag::new(View::Front, Modality::Depth),
            SourceTag::new(View::Front, Modality::Ir),
        ]
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Top => "top",
            View::Front => "front",
        })
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Depth => "depth",
            Modality::Ir => "ir",
        })
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.view, self.modality)
    }
}

impl FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (v, m) = s.split_once('.').ok_or_else(|| {
            Error::Config(format!("source tag {s:?} is not of the form view.modality"))
        })?;
        let view = match v {
            "top" => View::Top,
            "front" => View::Front,
            _ => {
                return Err(Error::Config(format!(
                    "unknown view {v:?} (expected top or front)"
                )))
            }
        };
        let modality = match m {
            "depth" => Modality::Depth,
            "ir" => Modality::Ir,
            _ => {
                return Err(Error::Config(format!(
                    "unknown modality {m:?} (expected depth or ir)"
                )))
            }
        };
        Ok(SourceTag { view, modality })
    }
}

/// Checks a run's source list: 1 to 4 entries, no duplicates.
pub fn validate_sources(sources: &[SourceTag]) -> Result<()> {
    if sources.is_empty() || sources.len() > 4 {
        return Err(Error::Config(format!(
            "expected 1 to 4 sources, got {}",
            sources.len()
        )));
    }
    for (i, a) in sources.iter().enumerate() {
        if sources[..i].contains(a) {
            return Err(Error::Config(format!("source {a} listed twice")));
        }
    }
    Ok(())
}
