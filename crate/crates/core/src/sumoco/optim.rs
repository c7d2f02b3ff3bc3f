use crate::error::{Error, Result};
use crate::nn::{ParamStore, StoreGrads};

/// `key <- m * key + (1 - m) * query`, elementwise over every parameter.
pub fn momentum_update(key: &mut ParamStore, query: &ParamStore, m: f64) -> Result<()> {
    if !key.same_structure(query) {
        return Err(Error::Contract(
            "momentum update needs structurally identical parameter stores".into(),
        ));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum {m} outside [0, 1]")));
    }
    for (k, q) in key.tensors_mut().iter_mut().zip(query.tensors()) {
        for (a, b) in k.data_mut().iter_mut().zip(q.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// Adam over one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.numel()])
                .collect(),
            v: store
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.numel()])
                .collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Parameters without a gradient still see their
    /// moments decay, as if the gradient were zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &StoreGrads, lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}, gradients cover {}",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, t) in store.tensors_mut().iter_mut().enumerate() {
            let g = grads.get(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
