use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{EncoderBlock, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

use super::maps::uniform_shape;

/// Origin of one `C`-vector patch: source slot `i` and flattened position `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchMeta {
    pub source: usize,
    pub position: usize,
}

/// Turns `M` maps of `C x T x H x W` into an `(M*N) x C` sequence, source-major,
/// positions in t, h, w row-major order.
pub fn patchify(s: &mut Session, maps: &[Var]) -> Result<(Var, Vec<PatchMeta>)> {
    let shape = uniform_shape(s, maps)?;
    let c = shape[0];
    let n: usize = shape[1..].iter().product();
    let mut rows = Vec::with_capacity(maps.len());
    for &m in maps {
        let flat = s.tape.reshape(m, &[c, n])?;
        rows.push(s.tape.transpose(flat)?);
    }
    let seq = if rows.len() == 1 {
        rows[0]
    } else {
        s.tape.concat(&rows, 0)?
    };
    let meta = (0..maps.len())
        .flat_map(|source| (0..n).map(move |position| PatchMeta { source, position }))
        .collect();
    Ok((seq, meta))
}

/// Inverse of [`patchify`] for a full sequence: rebuilds `M` maps of `geometry`.
pub fn unpatchify(s: &mut Session, seq: Var, m: usize, geometry: [usize; 4]) -> Result<Vec<Var>> {
    let [c, t, h, w] = geometry;
    let n = t * h * w;
    if s.tape.shape(seq) != [m * n, c] {
        return Err(Error::Dimension(format!(
            "cannot reassemble {:?} into {m} maps of {geometry:?}",
            s.tape.shape(seq)
        )));
    }
    (0..m)
        .map(|i| {
            let part = s.tape.narrow(seq, 0, i * n, n)?;
            let cols = s.tape.transpose(part)?;
            s.tape.reshape(cols, &geometry)
        })
        .collect()
}

/// `q_i^(j) = p_i^(j) + m_i + s^(j)`.
pub fn embed_patches(
    s: &mut Session,
    seq: Var,
    meta: &[PatchMeta],
    source_emb: ParamId,
    pos_emb: ParamId,
) -> Result<Var> {
    let m = s.param(source_emb);
    let p = s.param(pos_emb);
    let (ms, ps) = (s.tape.shape(m).to_vec(), s.tape.shape(p).to_vec());
    if let Some(bad) = meta
        .iter()
        .find(|pm| pm.source >= ms[0] || pm.position >= ps[0])
    {
        return Err(Error::Dimension(format!(
            "patch {bad:?} outside embedding tables of {} sources and {} positions",
            ms[0], ps[0]
        )));
    }
    let src_idx: Vec<usize> = meta.iter().map(|pm| pm.source).collect();
    let pos_idx: Vec<usize> = meta.iter().map(|pm| pm.position).collect();
    let me = s.tape.gather_rows(m, &src_idx)?;
    let pe = s.tape.gather_rows(p, &pos_idx)?;
    let q = s.tape.add(seq, me)?;
    s.tape.add(q, pe)
}

/// Number of patches dropped from a sequence of `len` at ratio `ratio`.
pub fn mask_count(len: usize, ratio: f64) -> usize {
    // tolerance keeps products such as 0.29 * 100 from flooring one short
    ((ratio * len as f64) + 1e-9).floor() as usize
}

/// Indices (ascending) of the patches that survive random masking.
pub fn mask_patches<R: Rng + ?Sized>(
    len: usize,
    ratio: f64,
    rng: &mut R,
    training: bool,
) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    if !training || ratio == 0.0 {
        return Ok((0..len).collect());
    }
    let drop = mask_count(len, ratio);
    if drop >= len {
        return Err(Error::Config(format!(
            "mask ratio {ratio} would drop all {len} patches"
        )));
    }
    let mut dropped = vec![false; len];
    for i in sample(rng, len, drop) {
        dropped[i] = true;
    }
    Ok((0..len).filter(|&i| !dropped[i]).collect())
}

/// Embeddings and encoder blocks of one MHSA fusion stage.
#[derive(Debug, Clone, PartialEq)]
pub struct MhsaFusion {
    pub source_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub num_sources: usize,
    pub geometry: [usize; 4],
}

impl MhsaFusion {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        num_sources: usize,
        geometry: [usize; 4],
        heads: usize,
        blocks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::Config(
                "MHSA fusion needs at least one encoder block".into(),
            ));
        }
        let c = geometry[0];
        let n = geometry[1] * geometry[2] * geometry[3];
        let source_emb = store.add(
            format!("{name}.source_emb"),
            Tensor::zeros(&[num_sources, c]),
        );
        let pos_emb = store.add(format!("{name}.pos_emb"), Tensor::zeros(&[n, c]));
        let blocks = (0..blocks)
            .map(|b| EncoderBlock::new(store, &format!("{name}.block{b}"), c, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(MhsaFusion {
            source_emb,
            pos_emb,
            blocks,
            num_sources,
            geometry,
        })
    }

    pub fn positions(&self) -> usize {
        self.geometry[1..].iter().product()
    }

    /// Patchify and embed; `slots[k]` is the embedding slot of `maps[k]`.
    pub fn tokens(
        &self,
        s: &mut Session,
        maps: &[Var],
        slots: &[usize],
    ) -> Result<(Var, Vec<PatchMeta>)> {
        let (seq, mut meta) = patchify(s, maps)?;
        for pm in &mut meta {
            pm.source = slots[pm.source];
        }
        let q = embed_patches(s, seq, &meta, self.source_emb, self.pos_emb)?;
        Ok((q, meta))
    }

    /// Runs the encoder blocks sequence to sequence.
    pub fn attend(&self, s: &mut Session, seq: Var) -> Result<Var> {
        let mut x = seq;
        for b in &self.blocks {
            x = b.forward(s, x)?;
        }
        Ok(x)
    }

    /// Sum of attended patches: the fused vector `g`.
    pub fn sum_tokens(s: &mut Session, attended: Var) -> Result<Var> {
        s.tape.reduce(crate::tensor::Reduce::Sum, attended, &[0])
    }

    /// Places attended patches back at their positions and sums sources that share
    /// a position, giving a `C x T x H x W` map (dropped positions stay zero).
    pub fn scatter_to_map(
        &self,
        s: &mut Session,
        attended: Var,
        meta: &[PatchMeta],
    ) -> Result<Var> {
        let n = self.positions();
        let c = self.geometry[0];
        let idx: Vec<usize> = meta.iter().map(|pm| pm.source * n + pm.position).collect();
        let full = s.tape.scatter_rows(attended, &idx, self.num_sources * n)?;
        let per_source = s.tape.reshape(full, &[self.num_sources, n, c])?;
        let summed = s
            .tape
            .reduce(crate::tensor::Reduce::Sum, per_source, &[0])?;
        let cols = s.tape.transpose(summed)?;
        s.tape.reshape(cols, &self.geometry)
    }
}
