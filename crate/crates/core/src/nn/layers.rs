use rand::Rng;

use super::params::{ParamId, ParamStore, Session};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights.
pub fn uniform_init<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(&[out_dim, in_dim], in_dim, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x W^T + b` for `x` of shape `n x in` or a single vector of length `in`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) || shape.len() > 2 {
            return Err(Error::Dimension(format!(
                "linear layer expects last dim {}, got shape {shape:?}",
                self.in_dim
            )));
        }
        let x2 = if shape.len() == 1 {
            s.tape.reshape(x, &[1, self.in_dim])?
        } else {
            x
        };
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let wt = s.tape.transpose(w)?;
        let y = s.tape.matmul(x2, wt)?;
        let y = s.tape.add(y, b)?;
        if shape.len() == 1 {
            s.tape.reshape(y, &[self.out_dim])
        } else {
            Ok(y)
        }
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut R) -> Self {
        Mlp2 {
            first: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng),
            second: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.first.forward(s, x)?;
        let h = s.tape.relu(h);
        self.second.forward(s, h)
    }
}

/// Per-row layer normalization with a learned per-channel affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            scale: store.add(format!("{name}.scale"), Tensor::full(&[dim], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[dim])),
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        layer_norm(s, x, self.scale, self.shift, self.eps)
    }
}

/// Normalizes each row of `x` (`n x C`) and applies `scale`/`shift` per column.
pub fn layer_norm(
    s: &mut Session,
    x: Var,
    scale: ParamId,
    shift: ParamId,
    eps: f64,
) -> Result<Var> {
    let n = s.tape.row_norm(x, eps)?;
    let g = s.param(scale);
    let b = s.param(shift);
    let y = s.tape.mul(n, g)?;
    s.tape.add(y, b)
}

/// Multi-head self-attention over a sequence of `r` tokens of width `dim`.
///
/// Q, K and V are single `dim x dim` projections whose output columns are split
/// into `num_heads` contiguous groups; this is the same as one projection per head.
#[derive(Debug, Clone, PartialEq)]
pub struct MhsaLayer {
    pub num_heads: usize,
    pub dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MhsaLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || !dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {num_heads} heads"
            )));
        }
        Ok(MhsaLayer {
            num_heads,
            dim,
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
        })
    }

    pub fn forward(&self, s: &mut Session, seq: Var) -> Result<Var> {
        Ok(self.forward_with_weights(s, seq)?.0)
    }

    /// Returns the output and the `r x r` attention matrix of every head.
    pub fn forward_with_weights(&self, s: &mut Session, seq: Var) -> Result<(Var, Vec<Var>)> {
        let shape = s.tape.shape(seq).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::Contract(format!(
                "self-attention needs at least one token, got shape {shape:?}"
            )));
        }
        let q = self.query.forward(s, seq)?;
        let k = self.key.forward(s, seq)?;
        let v = self.value.forward(s, seq)?;
        let dh = self.dim / self.num_heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        let mut weights = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = s.tape.narrow(q, 1, h * dh, dh)?;
            let kh = s.tape.narrow(k, 1, h * dh, dh)?;
            let vh = s.tape.narrow(v, 1, h * dh, dh)?;
            let kt = s.tape.transpose(kh)?;
            let scores = s.tape.matmul(qh, kt)?;
            let scores = s.tape.scale(scores, inv);
            let attn = s.tape.softmax(scores, 1)?;
            heads.push(s.tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            s.tape.concat(&heads, 1)?
        };
        Ok((self.out.forward(s, cat)?, weights))
    }
}

/// Pre-norm transformer encoder block with a ReLU MLP of hidden width `4 * dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attention: MhsaLayer,
    pub norm2: LayerNorm,
    pub mlp: Mlp2,
}

impl EncoderBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attention: MhsaLayer::new(store, &format!("{name}.attn"), dim, num_heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp2::new(store, &format!("{name}.mlp"), [dim, 4 * dim, dim], rng),
        })
    }

    pub fn forward(&self, s: &mut Session, seq: Var) -> Result<Var> {
        let n1 = self.norm1.forward(s, seq)?;
        let a = self.attention.forward(s, n1)?;
        let y = s.tape.add(seq, a)?;
        let n2 = self.norm2.forward(s, y)?;
        let m = self.mlp.forward(s, n2)?;
        s.tape.add(y, m)
    }
}
