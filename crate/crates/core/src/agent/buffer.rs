use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One stored step. Observations are kept flattened and already scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: [f64; 2],
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// Ring buffer with its own sampling stream.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
    sampler: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, sampler: ChaCha8Rng) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            cursor: 0,
            sampler,
        }
    }

    pub fn with_seed(capacity: usize, seed: u64) -> Self {
        Self::new(capacity, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Position the next push writes to.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Draws `batch` indices uniformly, with replacement, from the stored range.
    pub fn sample_indices(&mut self, batch: usize) -> Result<Vec<usize>> {
        if self.items.len() < batch {
            return Err(Error::InsufficientBuffer {
                size: self.items.len(),
                batch,
            });
        }
        let n = self.items.len();
        Ok((0..batch).map(|_| self.sampler.gen_range(0..n)).collect())
    }

    pub fn sample(&mut self, batch: usize) -> Result<Vec<&Transition>> {
        let idx = self.sample_indices(batch)?;
        Ok(idx.into_iter().map(|i| &self.items[i]).collect())
    }
}
