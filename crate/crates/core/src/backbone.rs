//! Per-source residual 3D CNN feature extractors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{uniform_init, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<[usize; 3]>,
    pub kernel: [usize; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            stage_channels: vec![8, 16, 32],
            stage_strides: vec![[1, 2, 2], [2, 2, 2], [2, 2, 2]],
            kernel: [3, 3, 3],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config(
                "backbone in_channels must be positive".into(),
            ));
        }
        if self.stage_channels.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::Config(format!(
                "backbone has {} stage widths but {} stage strides",
                self.stage_channels.len(),
                self.stage_strides.len()
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config(
                "backbone stage widths must be positive".into(),
            ));
        }
        if self.stage_strides.iter().flatten().any(|&s| s == 0) {
            return Err(Error::Config(format!(
                "backbone strides must be >= 1, got {:?}",
                self.stage_strides
            )));
        }
        if self.kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config(format!(
                "backbone kernel must have odd positive sizes, got {:?}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Width C of the output feature map.
    pub fn out_channels(&self) -> usize {
        *self
            .stage_channels
            .last()
            .expect("validated config has stages")
    }

    /// Cumulative stride per (t, h, w); inputs must be multiples of these.
    pub fn required_multiples(&self) -> [usize; 3] {
        let mut m = [1; 3];
        for s in &self.stage_strides {
            for d in 0..3 {
                m[d] *= s[d];
            }
        }
        m
    }

    /// Output `[C, T, H, W]` for an input clip of `[T, H, W]`.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 4]> {
        let m = self.required_multiples();
        if (0..3).any(|d| input[d] == 0 || !input[d].is_multiple_of(m[d])) {
            return Err(Error::Dimension(format!(
                "clip dims {input:?} must be multiples of {m:?} (t, h, w)"
            )));
        }
        Ok([
            self.out_channels(),
            input[0] / m[0],
            input[1] / m[1],
            input[2] / m[2],
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvParams {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct NormParams {
    scale: ParamId,
    shift: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    down: ConvParams,
    down_norm: NormParams,
    res: ConvParams,
    res_norm: NormParams,
    stride: [usize; 3],
}

/// Parameter handles of one source's backbone; the values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    cfg: BackboneConfig,
    stages: Vec<Stage>,
}

/// Output of a backbone: a `C x T x H x W` map on the session tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    pub data: Var,
    pub source_id: usize,
}

fn conv_params<R: rand::Rng>(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    k: [usize; 3],
    rng: &mut R,
) -> ConvParams {
    let fan_in = cin * k.iter().product::<usize>();
    ConvParams {
        weight: store.add(
            format!("{name}.weight"),
            uniform_init(&[cout, cin, k[0], k[1], k[2]], fan_in, rng),
        ),
        bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
    }
}

fn norm_params(store: &mut ParamStore, name: &str, c: usize) -> NormParams {
    NormParams {
        scale: store.add(format!("{name}.scale"), Tensor::full(&[c], 1.0)),
        shift: store.add(format!("{name}.shift"), Tensor::zeros(&[c])),
    }
}

impl Backbone {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut cin = cfg.in_channels;
        let mut stages = Vec::with_capacity(cfg.stage_channels.len());
        for (i, (&cout, &stride)) in cfg
            .stage_channels
            .iter()
            .zip(&cfg.stage_strides)
            .enumerate()
        {
            let p = format!("{name}.stage{i}");
            stages.push(Stage {
                down: conv_params(store, &format!("{p}.down"), cin, cout, cfg.kernel, rng),
                down_norm: norm_params(store, &format!("{p}.down_norm"), cout),
                res: conv_params(store, &format!("{p}.res"), cout, cout, cfg.kernel, rng),
                res_norm: norm_params(store, &format!("{p}.res_norm"), cout),
                stride,
            });
            cin = cout;
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Runs the clip (`in_channels x T x H x W`) through every stage.
    pub fn extract(&self, s: &mut Session, clip: Var, source_id: usize) -> Result<FeatureMap> {
        let shape = s.tape.shape(clip).to_vec();
        if shape.len() != 4 || shape[0] != self.cfg.in_channels {
            return Err(Error::Dimension(format!(
                "backbone expects a {}xTxHxW clip, got shape {shape:?}",
                self.cfg.in_channels
            )));
        }
        self.cfg.output_shape([shape[1], shape[2], shape[3]])?;
        let pad = self.cfg.kernel.map(|k| k / 2);
        let mut x = clip;
        for st in &self.stages {
            let h = self.conv(s, x, &st.down, st.stride, pad)?;
            let h = channel_norm(s, h, &st.down_norm)?;
            let h = s.tape.relu(h);
            let r = self.conv(s, h, &st.res, [1, 1, 1], pad)?;
            let r = channel_norm(s, r, &st.res_norm)?;
            let y = s.tape.add(h, r)?;
            x = s.tape.relu(y);
        }
        Ok(FeatureMap { data: x, source_id })
    }

    fn conv(
        &self,
        s: &mut Session,
        x: Var,
        p: &ConvParams,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let w = s.param(p.weight);
        let b = s.param(p.bias);
        s.tape.conv3d(x, w, Some(b), stride, pad)
    }
}

/// Layer norm over (T, H, W) of each channel, followed by a per-channel affine map.
fn channel_norm(s: &mut Session, x: Var, p: &NormParams) -> Result<Var> {
    let n = s.tape.row_norm(x, 1e-5)?;
    let g = s.param(p.scale);
    let b = s.param(p.shift);
    let y = s.tape.mul_rows(n, g)?;
    s.tape.add_rows(y, b)
}

/// Builds a standalone backbone in a fresh store, seeded deterministically.
pub fn build_backbone(
    cfg: &BackboneConfig,
    seed: u64,
    group: u16,
) -> Result<(ParamStore, Backbone)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(group);
    let bb = Backbone::new(&mut store, "backbone", cfg, &mut rng)?;
    Ok((store, bb))
}
