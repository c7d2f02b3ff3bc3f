//! Named parameter storage and per-graph parameter binding.
//!
//! Layers hold [`ParamId`] handles; values live in a [`ParamStore`]. Two stores with
//! the same structure (the query and key encoders) can drive the same layer
//! handles, which is what the momentum update relies on.

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    group: u16,
    index: u32,
}

impl ParamId {
    pub fn group(self) -> u16 {
        self.group
    }

    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    group: u16,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(group: u16) -> Self {
        ParamStore {
            group,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn group(&self) -> u16 {
        self.group
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let mut tensor = tensor;
        tensor.set_requires_grad(true);
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId {
            group: self.group,
            index: (self.tensors.len() - 1) as u32,
        }
    }

    fn check(&self, id: ParamId) {
        assert_eq!(
            id.group, self.group,
            "parameter from group {} used with store of group {}",
            id.group, self.group
        );
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        self.check(id);
        &self.tensors[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.check(id);
        &mut self.tensors[id.index()]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(|i| ParamId {
            group: self.group,
            index: i as u32,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Same names and shapes in the same order.
    pub fn same_structure(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Replaces every value from `source`, which must have the same structure.
    pub fn copy_values_from(&mut self, source: &ParamStore) -> Result<()> {
        if !self.same_structure(source) {
            return Err(Error::Contract(
                "parameter stores differ in structure".into(),
            ));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&source.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Per-parameter gradients for one store, aligned with its entries.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl StoreGrads {
    pub fn empty(len: usize) -> Self {
        StoreGrads {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.grads[index].as_deref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn add(&mut self, other: &StoreGrads) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            let Some(src) = src else { continue };
            match dst {
                Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
                None => *dst = Some(src.clone()),
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Largest absolute gradient entry; zero when nothing was reached.
    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Accumulates into the `grad` buffers of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.grads.len() {
            return Err(Error::Contract(format!(
                "{} gradients for a store of {} parameters",
                self.grads.len(),
                store.len()
            )));
        }
        for (t, g) in store.tensors.iter_mut().zip(&self.grads) {
            if let Some(g) = g {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// A tape plus the parameter stores its graph reads from.
///
/// Parameters are copied onto the tape the first time a layer asks for them and
/// reused afterwards, so each parameter appears once per graph.
pub struct Session<'a> {
    pub tape: Tape,
    stores: Vec<&'a ParamStore>,
    bound: Vec<Vec<Option<Var>>>,
}

impl<'a> Session<'a> {
    pub fn new(stores: &[&'a ParamStore]) -> Self {
        Self::with_tape(Tape::new(), stores)
    }

    /// Forward-only session: no gradients, no backward state.
    pub fn inference(stores: &[&'a ParamStore]) -> Self {
        Self::with_tape(Tape::inference(), stores)
    }

    fn with_tape(tape: Tape, stores: &[&'a ParamStore]) -> Self {
        Session {
            tape,
            bound: stores.iter().map(|s| vec![None; s.len()]).collect(),
            stores: stores.to_vec(),
        }
    }

    fn slot(&self, group: u16) -> usize {
        self.stores
            .iter()
            .position(|s| s.group == group)
            .unwrap_or_else(|| panic!("parameter group {group} is not bound to this session"))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let slot = self.slot(id.group);
        if let Some(v) = self.bound[slot][id.index()] {
            return v;
        }
        let v = self.tape.input(self.stores[slot].get(id));
        self.bound[slot][id.index()] = Some(v);
        v
    }

    /// Gradients for every parameter of `group` that took part in the graph.
    pub fn grads(&self, g: &Gradients, group: u16) -> StoreGrads {
        let slot = self.slot(group);
        StoreGrads {
            grads: self.bound[slot]
                .iter()
                .map(|v| v.and_then(|v| g.wrt(v)).map(<[f64]>::to_vec))
                .collect(),
        }
    }
}
