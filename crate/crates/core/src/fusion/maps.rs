use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{uniform_init, Linear, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

use super::FusionKind;

/// Checks that every map has the same `C x T x H x W` shape and returns it.
pub(crate) fn uniform_shape(s: &Session, maps: &[Var]) -> Result<Vec<usize>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Contract("fusion needs at least one feature map".into()))?;
    let shape = s.tape.shape(*first).to_vec();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!(
            "feature maps must be C x T x H x W, got {shape:?}"
        )));
    }
    for m in &maps[1..] {
        if s.tape.shape(*m) != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "feature maps disagree in shape: {shape:?} vs {:?}",
                s.tape.shape(*m)
            )));
        }
    }
    Ok(shape)
}

/// Elementwise sum of the maps.
pub fn fuse_sum(s: &mut Session, maps: &[Var]) -> Result<Var> {
    uniform_shape(s, maps)?;
    let mut acc = maps[0];
    for &m in &maps[1..] {
        acc = s.tape.add(acc, m)?;
    }
    Ok(acc)
}

/// Global average pool over T, H, W.
pub fn pool_flatten(s: &mut Session, map: Var) -> Result<Var> {
    s.tape.avg_pool_global(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PointwiseConv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        PointwiseConv {
            weight: store.add(
                format!("{name}.weight"),
                uniform_init(&[cout, cin, 1, 1, 1], cin, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.tape.conv3d(x, w, Some(b), [1, 1, 1], [0, 0, 0])
    }
}

/// Parameters of one map-level fusion over a fixed number of sources.
#[derive(Debug, Clone, PartialEq)]
pub enum MapFuser {
    Sum,
    Conv(PointwiseConv),
    Se {
        reduce: Linear,
        expand: Linear,
        normalize: bool,
    },
    Aff {
        local_reduce: PointwiseConv,
        local_expand: PointwiseConv,
        global_reduce: Linear,
        global_expand: Linear,
        normalize: bool,
    },
}

fn bottleneck(mc: usize, rho: usize) -> Result<usize> {
    if rho == 0 || mc / rho < 1 {
        return Err(Error::Config(format!(
            "reduction ratio {rho} leaves no bottleneck channels for width {mc}"
        )));
    }
    Ok(mc / rho)
}

impl MapFuser {
    /// `kind` must be one of Sum, Conv, SE, AFF.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kind: FusionKind,
        num_maps: usize,
        channels: usize,
        rho: usize,
        normalize: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mc = num_maps * channels;
        Ok(match kind {
            FusionKind::Sum => MapFuser::Sum,
            FusionKind::Conv => MapFuser::Conv(PointwiseConv::new(
                store,
                &format!("{name}.pw"),
                mc,
                channels,
                rng,
            )),
            FusionKind::Se => {
                let cb = bottleneck(mc, rho)?;
                MapFuser::Se {
                    reduce: Linear::new(store, &format!("{name}.se_reduce"), mc, cb, rng),
                    expand: Linear::new(store, &format!("{name}.se_expand"), cb, mc, rng),
                    normalize,
                }
            }
            FusionKind::Aff => {
                let cb = bottleneck(mc, rho)?;
                MapFuser::Aff {
                    local_reduce: PointwiseConv::new(
                        store,
                        &format!("{name}.local_reduce"),
                        mc,
                        cb,
                        rng,
                    ),
                    local_expand: PointwiseConv::new(
                        store,
                        &format!("{name}.local_expand"),
                        cb,
                        mc,
                        rng,
                    ),
                    global_reduce: Linear::new(
                        store,
                        &format!("{name}.global_reduce"),
                        mc,
                        cb,
                        rng,
                    ),
                    global_expand: Linear::new(
                        store,
                        &format!("{name}.global_expand"),
                        cb,
                        mc,
                        rng,
                    ),
                    normalize,
                }
            }
            FusionKind::Mhsa => {
                return Err(Error::Contract(
                    "MHSA fusion works on patch sequences, not map fusers".into(),
                ))
            }
        })
    }

    pub fn fuse(&self, s: &mut Session, maps: &[Var]) -> Result<Var> {
        Ok(self.fuse_with_weights(s, maps)?.0)
    }

    /// Fused map plus, for SE and AFF, the per-source weights `W_i`
    /// (`C` for SE, `C x T x H x W` for AFF).
    pub fn fuse_with_weights(
        &self,
        s: &mut Session,
        maps: &[Var],
    ) -> Result<(Var, Option<Vec<Var>>)> {
        let shape = uniform_shape(s, maps)?;
        match self {
            MapFuser::Sum => Ok((fuse_sum(s, maps)?, None)),
            MapFuser::Conv(pw) => {
                let cat = concat_channels(s, maps)?;
                Ok((pw.forward(s, cat)?, None))
            }
            MapFuser::Se {
                reduce,
                expand,
                normalize,
            } => {
                let cat = concat_channels(s, maps)?;
                let squeezed = s.tape.avg_pool_global(cat)?;
                let h = reduce.forward(s, squeezed)?;
                let h = s.tape.relu(h);
                let h = expand.forward(s, h)?;
                let gates = s.tape.sigmoid(h);
                let w = split_and_normalize(s, gates, maps.len(), shape[0], *normalize)?;
                let mut out = None;
                for (&f, &wi) in maps.iter().zip(&w) {
                    let term = s.tape.mul_rows(f, wi)?;
                    out = Some(match out {
                        None => term,
                        Some(acc) => s.tape.add(acc, term)?,
                    });
                }
                Ok((out.expect("at least one map"), Some(w)))
            }
            MapFuser::Aff {
                local_reduce,
                local_expand,
                global_reduce,
                global_expand,
                normalize,
            } => {
                let cat = concat_channels(s, maps)?;
                let l = local_reduce.forward(s, cat)?;
                let l = s.tape.relu(l);
                let l = local_expand.forward(s, l)?;
                let pooled = s.tape.avg_pool_global(cat)?;
                let g = global_reduce.forward(s, pooled)?;
                let g = s.tape.relu(g);
                let g = global_expand.forward(s, g)?;
                let logits = s.tape.add_rows(l, g)?;
                let gates = s.tape.sigmoid(logits);
                let w = split_and_normalize(s, gates, maps.len(), shape[0], *normalize)?;
                let mut out = None;
                for (&f, &wi) in maps.iter().zip(&w) {
                    let term = s.tape.mul(f, wi)?;
                    out = Some(match out {
                        None => term,
                        Some(acc) => s.tape.add(acc, term)?,
                    });
                }
                Ok((out.expect("at least one map"), Some(w)))
            }
        }
    }
}

fn concat_channels(s: &mut Session, maps: &[Var]) -> Result<Var> {
    if maps.len() == 1 {
        Ok(maps[0])
    } else {
        s.tape.concat(maps, 0)
    }
}

/// Splits `M*C`-leading gates into `M` chunks; optionally divides each by the
/// per-position sum over chunks (plus 1e-8) so the weights average the sources.
fn split_and_normalize(
    s: &mut Session,
    gates: Var,
    m: usize,
    c: usize,
    normalize: bool,
) -> Result<Vec<Var>> {
    let chunks = (0..m)
        .map(|i| s.tape.narrow(gates, 0, i * c, c))
        .collect::<Result<Vec<_>>>()?;
    if !normalize {
        return Ok(chunks);
    }
    let mut total = chunks[0];
    for &w in &chunks[1..] {
        total = s.tape.add(total, w)?;
    }
    let total = s.tape.add_scalar(total, 1e-8);
    chunks.iter().map(|&w| s.tape.div(w, total)).collect()
}
