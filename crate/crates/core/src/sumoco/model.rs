use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::data::SourceTag;
use crate::error::{Error, Result};
use crate::fusion::{Fusion, Masking};
use crate::nn::{Mlp2, ParamStore, Session};
use crate::tensor::{Tensor, Var};

/// Parameter group of the query/key encoder stores.
pub const ENCODER_GROUP: u16 = 0;
/// Parameter group of the classifier store.
pub const HEAD_GROUP: u16 = 1;

/// Backbones, fusion and projection head. Layer handles only; values live in a store.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    sources: Vec<SourceTag>,
    backbones: Vec<Backbone>,
    fusion: Fusion,
    projection: Mlp2,
}

impl EncoderStack {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        let geometry = cfg.input_geometry()?;
        let backbones = cfg
            .sources
            .iter()
            .map(|t| Backbone::new(store, &format!("backbone.{t}"), &cfg.backbone, rng))
            .collect::<Result<Vec<_>>>()?;
        let fusion = Fusion::new(store, &cfg.fusion, &cfg.sources, geometry, rng)?;
        let c = geometry[0];
        let projection = Mlp2::new(store, "projection", [c, c, cfg.sumoco.embed_dim], rng);
        Ok(EncoderStack {
            sources: cfg.sources.clone(),
            backbones,
            fusion,
            projection,
        })
    }

    pub fn sources(&self) -> &[SourceTag] {
        &self.sources
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    /// Fused vector `g` and unit embedding `z`.
    pub fn encode(&self, s: &mut Session, clips: &[Var], masking: Masking) -> Result<(Var, Var)> {
        let g = self.fuse(s, clips, masking)?;
        let p = self.projection.forward(s, g)?;
        Ok((g, s.tape.l2_normalize(p)))
    }

    /// Backbones and fusion only.
    pub fn fuse(&self, s: &mut Session, clips: &[Var], masking: Masking) -> Result<Var> {
        let maps = self.maps(s, clips)?;
        self.fusion.forward(s, &maps, masking)
    }

    /// One backbone map per source.
    pub fn maps(&self, s: &mut Session, clips: &[Var]) -> Result<Vec<Var>> {
        if clips.len() != self.backbones.len() {
            return Err(Error::Contract(format!(
                "encoder built for {} sources received {} clips",
                self.backbones.len(),
                clips.len()
            )));
        }
        self.backbones
            .iter()
            .zip(clips)
            .enumerate()
            .map(|(i, (b, &c))| b.extract(s, c, i).map(|m| m.data))
            .collect()
    }
}

/// Two-layer classifier over the detached fused vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    mlp: Mlp2,
    num_classes: usize,
}

impl ClassifierHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        width: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        ClassifierHead {
            mlp: Mlp2::new(store, "classifier", [width, width, num_classes], rng),
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn forward(&self, s: &mut Session, g: Var) -> Result<Var> {
        self.mlp.forward(s, g)
    }
}

/// Everything a run trains: query encoder, its momentum copy, and the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    pub classes: Vec<String>,
    pub encoder: EncoderStack,
    pub classifier: ClassifierHead,
    pub query: ParamStore,
    pub key: ParamStore,
    pub head: ParamStore,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl Model {
    /// Fresh weights drawn from the run seed; the key encoder starts as an exact copy.
    pub fn new(cfg: &RunConfig, classes: Vec<String>) -> Result<Self> {
        cfg.validate()?;
        if classes.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                classes.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut query = ParamStore::new(ENCODER_GROUP);
        let encoder = EncoderStack::new(&mut query, cfg, &mut rng)?;
        let mut head = ParamStore::new(HEAD_GROUP);
        let classifier =
            ClassifierHead::new(&mut head, encoder.fusion.width(), classes.len(), &mut rng);
        Ok(Model {
            config: cfg.clone(),
            classes,
            key: query.clone(),
            encoder,
            classifier,
            query,
            head,
        })
    }

    /// Eval-mode class probabilities for one sample.
    pub fn predict(&self, clips: &[Tensor], masking: Masking) -> Result<Vec<f64>> {
        let mut s = Session::inference(&[&self.query, &self.head]);
        let vars: Vec<Var> = clips.iter().map(|c| s.tape.input(c)).collect();
        let g = self.encoder.fuse(&mut s, &vars, masking)?;
        let logits = self.classifier.forward(&mut s, g)?;
        let probs = softmax(s.tape.value(logits));
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite class probabilities".into()));
        }
        Ok(probs)
    }

    /// Eval-mode backbone maps, one per source.
    pub fn backbone_maps(&self, clips: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut s = Session::inference(&[&self.query]);
        let vars: Vec<Var> = clips.iter().map(|c| s.tape.input(c)).collect();
        let maps = self.encoder.maps(&mut s, &vars)?;
        Ok(maps.into_iter().map(|m| s.tape.to_tensor(m)).collect())
    }

    /// Eval-mode class probabilities from precomputed backbone maps.
    pub fn predict_from_maps(&self, maps: &[Tensor], masking: Masking) -> Result<Vec<f64>> {
        let mut s = Session::inference(&[&self.query, &self.head]);
        let vars: Vec<Var> = maps.iter().map(|m| s.tape.input(m)).collect();
        let g = self.encoder.fusion.forward(&mut s, &vars, masking)?;
        let logits = self.classifier.forward(&mut s, g)?;
        let probs = softmax(s.tape.value(logits));
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite class probabilities".into()));
        }
        Ok(probs)
    }

    /// Eval-mode embedding `z` from either encoder.
    pub fn embed(&self, clips: &[Tensor], use_key: bool) -> Result<Vec<f64>> {
        let store = if use_key { &self.key } else { &self.query };
        let mut s = Session::inference(&[store]);
        let vars: Vec<Var> = clips.iter().map(|c| s.tape.input(c)).collect();
        let (_, z) = self.encoder.encode(&mut s, &vars, Masking::Off)?;
        Ok(s.tape.value(z).to_vec())
    }
}
