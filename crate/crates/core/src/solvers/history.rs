use std::collections::VecDeque;

use ndarray::Array1;

use crate::{Error, Result};

/// Recent (λ, ε) evaluations, oldest first, with strictly increasing λ.
#[derive(Debug, Clone, Default)]
pub struct StepHistory {
    entries: VecDeque<(f64, Array1<f64>)>,
    capacity: usize,
}

impl StepHistory {
    pub fn new(capacity: usize) -> Self {
        StepHistory {
            entries: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, lambda: f64, eps: Array1<f64>) -> Result<()> {
        if let Some((last, _)) = self.entries.back() {
            if !(lambda > *last) {
                return Err(Error::Singular(format!(
                    "history nodes must have increasing lambda ({last} then {lambda})"
                )));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((lambda, eps));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `j`-th newest entry (0 = newest).
    pub fn back(&self, j: usize) -> Result<(f64, &Array1<f64>)> {
        let n = self.entries.len();
        if j >= n {
            return Err(Error::InsufficientHistory {
                needed: j + 1,
                have: n,
            });
        }
        let (l, e) = &self.entries[n - 1 - j];
        Ok((*l, e))
    }

    /// The newest `k` entries, newest first.
    pub fn newest(&self, k: usize) -> Result<Vec<(f64, &Array1<f64>)>> {
        (0..k).map(|j| self.back(j)).collect()
    }
}
