//! Uniform time grid `0 = t_0 < … < t_N = T`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, XvaError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(XvaError::config("grid.horizon", "must be a positive finite number"));
        }
        if n_steps == 0 {
            return Err(XvaError::config("grid.n_steps", "must be at least 1"));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    /// Node time `t_k`; the last node is exactly `T`.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|k| self.time(k)).collect()
    }

    /// Index of the node at time `t`, if `t` sits on the grid up to a relative
    /// tolerance of `1e-9` steps.
    pub fn node_of(&self, t: f64) -> Option<usize> {
        let x = t / self.dt();
        let k = x.round();
        if (x - k).abs() <= 1e-9 * x.abs().max(1.0) && k >= 0.0 && k <= self.n_steps as f64 {
            Some(k as usize)
        } else {
            None
        }
    }

    /// First node index `k` with `t_k ≥ t` (saturating at `N + 1` when `t > T`).
    pub fn ceil_node(&self, t: f64) -> usize {
        if t > self.horizon {
            return self.n_steps + 1;
        }
        let x = t / self.dt();
        let k = x.ceil();
        // Values that sit on a node up to rounding belong to that node.
        if (x - (k - 1.0)).abs() <= 1e-12 * x.max(1.0) {
            return (k - 1.0).max(0.0) as usize;
        }
        (k as usize).min(self.n_steps)
    }
}
