use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A student-generated latent at key time `t'_k`, carried together with the
/// real key latents of the trajectory its noise was paired with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub key_index: usize,
    pub latent: Vec<f64>,
    /// Real key latents ordered `t'_m … t'_0`.
    pub keys: Vec<Vec<f64>>,
    pub source: usize,
}

impl QueueEntry {
    /// The real latent of the source trajectory at key `k`.
    pub fn real_at(&self, k: usize) -> &[f64] {
        let m = self.keys.len() - 1;
        &self.keys[m - k]
    }
}

/// FIFO queues `Q_0 … Q_m` with a per-queue capacity; pushing onto a full
/// queue evicts its oldest entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentQueues {
    capacity: usize,
    queues: Vec<VecDeque<QueueEntry>>,
}

impl LatentQueues {
    pub fn new(m: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("queue capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            queues: vec![VecDeque::new(); m + 1],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self, k: usize) -> usize {
        self.queues[k].len()
    }

    pub fn is_empty(&self, k: usize) -> bool {
        self.queues[k].is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.queues.iter().map(VecDeque::len).collect()
    }

    pub fn total(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn push(&mut self, k: usize, entry: QueueEntry) -> Result<()> {
        let m = self.queues.len() - 1;
        if k > m {
            return Err(Error::Usage(format!("queue index {k} beyond m = {m}")));
        }
        if entry.key_index != k {
            return Err(Error::Usage(format!(
                "entry for key {} pushed onto queue {k}",
                entry.key_index
            )));
        }
        if entry.keys.len() != m + 1 {
            return Err(Error::Shape(format!(
                "queue entry carries {} key latents, expected {}",
                entry.keys.len(),
                m + 1
            )));
        }
        let q = &mut self.queues[k];
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(entry);
        Ok(())
    }

    /// Oldest entry of `Q_k`, or `None` while the queue is still warming up.
    pub fn pop(&mut self, k: usize) -> Option<QueueEntry> {
        self.queues.get_mut(k)?.pop_front()
    }

    /// Up to `count` oldest entries of `Q_k`.
    pub fn pop_many(&mut self, k: usize, count: usize) -> Vec<QueueEntry> {
        let q = &mut self.queues[k];
        let take = count.min(q.len());
        q.drain(..take).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(k: usize, v: f64) -> QueueEntry {
        QueueEntry {
            key_index: k,
            latent: vec![v],
            keys: vec![vec![0.0]; 3],
            source: 0,
        }
    }

    #[test]
    fn fifo_order() {
        let mut q = LatentQueues::new(2, 4).unwrap();
        q.push(1, entry(1, 1.0)).unwrap();
        q.push(1, entry(1, 2.0)).unwrap();
        assert_eq!(q.pop(1).unwrap().latent, vec![1.0]);
        assert_eq!(q.pop(1).unwrap().latent, vec![2.0]);
    }

    #[test]
    fn empty_pop_signals_warm_up() {
        let mut q = LatentQueues::new(2, 4).unwrap();
        assert!(q.pop(0).is_none());
        assert!(q.pop_many(2, 8).is_empty());
    }

    #[test]
    fn overflow_evicts_oldest() {
        let mut q = LatentQueues::new(1, 3).unwrap();
        let e = |v| QueueEntry {
            keys: vec![vec![0.0]; 2],
            ..entry(0, v)
        };
        for v in 0..5 {
            q.push(0, e(v as f64)).unwrap();
        }
        assert_eq!(q.len(0), 3);
        assert_eq!(q.pop(0).unwrap().latent, vec![2.0]);
    }

    #[test]
    fn entries_must_match_their_queue() {
        let mut q = LatentQueues::new(2, 4).unwrap();
        assert!(matches!(q.push(0, entry(1, 0.0)), Err(Error::Usage(_))));
        assert!(matches!(q.push(3, entry(3, 0.0)), Err(Error::Usage(_))));
        let short = QueueEntry {
            keys: vec![vec![0.0]],
            ..entry(2, 0.0)
        };
        assert!(matches!(q.push(2, short), Err(Error::Shape(_))));
    }

    #[test]
    fn real_latent_lookup_by_key_index() {
        let e = QueueEntry {
            key_index: 0,
            latent: vec![0.0],
            keys: vec![vec![10.0], vec![11.0], vec![12.0]],
            source: 4,
        };
        // keys are stored t'_2, t'_1, t'_0
        assert_eq!(e.real_at(2), &[10.0]);
        assert_eq!(e.real_at(0), &[12.0]);
    }
}
