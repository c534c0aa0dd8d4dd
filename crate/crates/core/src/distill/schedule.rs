use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::TimeGrid;

/// The `m + 1` key times `t'_m = 1 > … > t'_0 = 0`, uniformly spaced and
/// aligned with a uniform `n`-step grid. Index `k` ↔ time `t'_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeySchedule {
    intervals: usize,
    grid_steps: usize,
}

impl KeySchedule {
    pub fn new(grid_steps: usize, intervals: usize) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::Config("key schedule needs m >= 1".into()));
        }
        if grid_steps == 0 || !grid_steps.is_multiple_of(intervals) {
            return Err(Error::Config(format!(
                "uniform key spacing needs n divisible by m (n = {grid_steps}, m = {intervals})"
            )));
        }
        Ok(Self { intervals, grid_steps })
    }

    /// `m`, the number of student steps.
    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::uniform(self.grid_steps).expect("checked at construction")
    }

    /// Grid index of key `k`.
    pub fn grid_index(&self, k: usize) -> usize {
        assert!(k <= self.intervals, "key index {k} beyond m = {}", self.intervals);
        k * (self.grid_steps / self.intervals)
    }

    /// `t'_k`, identical to the grid time at [`Self::grid_index`].
    pub fn time(&self, k: usize) -> f64 {
        self.grid().time(self.grid_index(k))
    }

    /// Key times from `t'_m = 1` down to `t'_0 = 0`.
    pub fn descending(&self) -> Vec<f64> {
        (0..=self.intervals).rev().map(|k| self.time(k)).collect()
    }
}

/// Uniform key schedule for an `n`-step grid and `m` student steps.
pub fn make_key_schedule(n: usize, m: usize) -> Result<KeySchedule> {
    KeySchedule::new(n, m)
}
