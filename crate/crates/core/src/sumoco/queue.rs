use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Fixed-capacity FIFO of (unit embedding, label) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<(Vec<f64>, usize)>,
}

impl ContrastQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        ContrastQueue {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.entries.iter().map(|(e, l)| (e.as_slice(), *l))
    }

    /// Appends in batch order, evicting the oldest entries beyond capacity.
    /// Every embedding must have unit norm within 1e-6.
    pub fn push(&mut self, embeddings: &[Vec<f64>], labels: &[usize]) -> Result<()> {
        if embeddings.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} embeddings pushed with {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        for e in embeddings {
            if e.len() != self.dim {
                return Err(Error::Contract(format!(
                    "queue holds width {}, got embedding of width {}",
                    self.dim,
                    e.len()
                )));
            }
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "queued embeddings must be unit vectors, got norm {norm}"
                )));
            }
        }
        for (e, &l) in embeddings.iter().zip(labels) {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back((e.clone(), l));
        }
        Ok(())
    }
}
