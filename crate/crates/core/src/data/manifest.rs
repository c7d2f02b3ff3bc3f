use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::clip::{load_clip, Clip};
use super::source::{validate_sources, SourceTag};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub label: usize,
    /// Frames stored in each file, before temporal downsampling.
    pub frames: usize,
    /// Source tag (`"top.depth"`) to clip path relative to the manifest.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub sources: Vec<SourceTag>,
    pub classes: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        validate_sources(&self.sources).map_err(|e| Error::Data(e.to_string()))?;
        if self.classes.first().map(String::as_str) != Some("normal") {
            return Err(Error::Data("class 0 must be \"normal\"".into()));
        }
        let tags: Vec<String> = self.sources.iter().map(|t| t.to_string()).collect();
        for s in &self.samples {
            if s.label >= self.classes.len() {
                return Err(Error::Data(format!(
                    "sample {} has label {} but only {} classes exist",
                    s.id,
                    s.label,
                    self.classes.len()
                )));
            }
            if s.files.len() != tags.len() || tags.iter().any(|t| !s.files.contains_key(t)) {
                return Err(Error::Data(format!(
                    "sample {} must list exactly one file per source {tags:?}, has {:?}",
                    s.id,
                    s.files.keys().collect::<Vec<_>>()
                )));
            }
        }
        Ok(())
    }
}

/// A dataset on disk: a manifest plus the clip files it references.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSet {
    root: PathBuf,
    manifest: Manifest,
}

impl ClipSet {
    pub fn new(root: impl Into<PathBuf>, manifest: Manifest) -> Result<Self> {
        manifest.validate()?;
        Ok(ClipSet {
            root: root.into(),
            manifest,
        })
    }

    /// Opens `path/manifest.json`, or `path` itself when it names a file.
    pub fn open(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        ClipSet::new(root, manifest)
    }

    pub fn write_manifest(&self) -> Result<PathBuf> {
        let file = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&file, text + "\n").map_err(|e| Error::io(&file, e))?;
        Ok(file)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn sources(&self) -> &[SourceTag] {
        &self.manifest.sources
    }

    pub fn classes(&self) -> &[String] {
        &self.manifest.classes
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &SampleEntry {
        &self.manifest.samples[i]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.samples.iter().map(|s| s.label).collect()
    }

    pub fn has_source(&self, tag: SourceTag) -> bool {
        self.manifest.sources.contains(&tag)
    }

    /// Loads the raw clip of sample `i` for `tag`.
    pub fn load(&self, i: usize, tag: SourceTag) -> Result<Clip> {
        let s = self.sample(i);
        let rel = s
            .files
            .get(&tag.to_string())
            .ok_or_else(|| Error::Data(format!("sample {} has no {tag} clip", s.id)))?;
        let path = self.root.join(rel);
        let clip = load_clip(&path)?;
        if clip.t != s.frames {
            return Err(Error::Data(format!(
                "{}: manifest says {} frames, file has {}",
                path.display(),
                s.frames,
                clip.t
            )));
        }
        Ok(clip)
    }
}
