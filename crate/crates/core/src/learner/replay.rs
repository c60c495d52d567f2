//! Ring buffer of real transitions with a contiguous sequence sampler.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Stream;
use crate::types::ActionVector;
use crate::worldmodel::Sequence;

/// One environment step: the observation that preceded `action`, the action,
/// and the reward and observation it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub episode: u64,
    pub observation: Option<DVector<f64>>,
    pub action: ActionVector,
    pub reward: f64,
    pub next_observation: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    /// Index of the oldest item once full.
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::new(), head: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Item `i` in insertion order, oldest first.
    pub fn get(&self, i: usize) -> &Transition {
        &self.items[(self.head + i) % self.items.len()]
    }

    /// Start positions whose next `len` transitions share one episode.
    fn valid_starts(&self, len: usize) -> Vec<usize> {
        let n = self.items.len();
        if n < len {
            return Vec::new();
        }
        (0..=n - len)
            .filter(|&s| self.get(s).episode == self.get(s + len - 1).episode)
            .collect()
    }

    /// Uniform over windows of `len` consecutive transitions within one
    /// episode; returns `len` actions and `len + 1` observation slots.
    pub fn sample_sequence(&self, len: usize, stream: &mut Stream) -> Result<Sequence> {
        if len == 0 {
            return Err(Error::InvalidConfig("sequence length must be >= 1".into()));
        }
        let starts = self.valid_starts(len);
        if starts.is_empty() {
            return Err(Error::Empty("replay windows"));
        }
        let s = starts[stream.random_range(0..starts.len())];
        Ok(self.window(s, len))
    }

    pub fn sample_batch(&self, count: usize, len: usize, stream: &mut Stream) -> Result<Vec<Sequence>> {
        let starts = self.valid_starts(len);
        if starts.is_empty() {
            return Err(Error::Empty("replay windows"));
        }
        Ok((0..count)
            .map(|_| self.window(starts[stream.random_range(0..starts.len())], len))
            .collect())
    }

    fn window(&self, start: usize, len: usize) -> Sequence {
        let mut observations = Vec::with_capacity(len + 1);
        let mut rewards = Vec::with_capacity(len + 1);
        let mut actions = Vec::with_capacity(len);
        rewards.push(None);
        for i in 0..len {
            let t = self.get(start + i);
            observations.push(t.observation.clone());
            actions.push(t.action.clone());
            rewards.push(Some(t.reward));
        }
        observations.push(self.get(start + len - 1).next_observation.clone());
        Sequence { observations, rewards, actions }
    }
}
