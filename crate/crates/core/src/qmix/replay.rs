use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// One transition with normalized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub state: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub masks: Vec<bool>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub next_observations: Vec<Vec<f64>>,
    pub next_masks: Vec<bool>,
    pub terminal: bool,
}

impl Experience {
    pub fn validate(&self, agents: usize) -> Result<()> {
        let per_agent = [
            self.observations.len(),
            self.actions.len(),
            self.masks.len(),
            self.next_observations.len(),
            self.next_masks.len(),
        ];
        if per_agent.iter().any(|&l| l != agents) {
            return Err(Error::Shape(format!("experience is not sized for {agents} agents")));
        }
        if !self.reward.is_finite() {
            return Err(Error::NonFinite(format!("reward {}", self.reward)));
        }
        Ok(())
    }
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayMemory {
    capacity: usize,
    items: Vec<Experience>,
    cursor: usize,
    pushed: u64,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, items: Vec::new(), cursor: 0, pushed: 0 })
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

    /// Slot the next push overwrites once full.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn get(&self, i: usize) -> Option<&Experience> {
        self.items.get(i)
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(e);
        } else {
            self.items[self.cursor] = e;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.pushed += 1;
    }

    /// Indices of a uniform batch, distinct within the batch.
    pub fn sample_indices(&self, batch: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
        if batch == 0 || batch > self.items.len() {
            return Err(Error::Contract(format!(
                "cannot sample {batch} of {} stored transitions",
                self.items.len()
            )));
        }
        Ok(index::sample(rng, self.items.len(), batch).into_vec())
    }

    pub fn sample(&self, batch: usize, rng: &mut SimRng) -> Result<Vec<&Experience>> {
        Ok(self
            .sample_indices(batch, rng)?
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }

    /// Cursor and counters without the stored transitions.
    pub fn summary(&self) -> ReplaySummary {
        ReplaySummary {
            capacity: self.capacity,
            len: self.items.len(),
            cursor: self.cursor,
            pushed: self.pushed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub capacity: usize,
    pub len: usize,
    pub cursor: usize,
    pub pushed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn exp(r: f64) -> Experience {
        Experience {
            state: vec![r],
            observations: vec![vec![0.0]],
            actions: vec![0],
            masks: vec![false],
            reward: r,
            next_state: vec![r],
            next_observations: vec![vec![0.0]],
            next_masks: vec![false],
            terminal: false,
        }
    }

    #[test]
    fn ring_buffer_overwrites_oldest() {
        let mut m = ReplayMemory::new(3).unwrap();
        for i in 0..5 {
            m.push(exp(i as f64));
        }
        assert_eq!(m.len(), 3);
        let rewards: Vec<f64> = (0..3).map(|i| m.get(i).unwrap().reward).collect();
        assert_eq!(rewards, vec![3.0, 4.0, 2.0]);
        assert_eq!(m.cursor(), 2);
    }

    #[test]
    fn batches_are_distinct_and_bounded() {
        let mut m = ReplayMemory::new(10).unwrap();
        for i in 0..10 {
            m.push(exp(i as f64));
        }
        let mut rng = seeded(0);
        let mut idx = m.sample_indices(10, &mut rng).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        assert!(m.sample_indices(11, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_uniform() {
        let mut m = ReplayMemory::new(50).unwrap();
        for i in 0..50 {
            m.push(exp(i as f64));
        }
        let mut rng = seeded(1);
        let mut counts = [0u32; 50];
        let draws = 100_000 / 4;
        for _ in 0..draws {
            for i in m.sample_indices(4, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        let total = (draws * 4) as f64;
        let p = 1.0 / 50.0;
        let mean = total * p;
        let sd = (total * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 5.0 * sd, "{c} vs {mean}");
        }
    }

    #[test]
    fn non_finite_reward_rejected() {
        assert!(exp(f64::NAN).validate(1).is_err());
        assert!(exp(1.0).validate(2).is_err());
    }
}
