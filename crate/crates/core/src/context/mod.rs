//! Sliding window of the most recent transitions used as task evidence.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvError, Environment, Transition};
use crate::Tensor;

/// How missing leading rows of a snapshot are presented to the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero rows flagged invalid; they contribute nothing to the belief.
    #[default]
    Mask,
    /// Zero rows treated as real observations.
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextBuffer {
    capacity: usize,
    entries: VecDeque<Transition>,
    pushes: u64,
}

/// Fixed-size view of a buffer: `rows` is `[N, W]`, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSnapshot {
    pub rows: Tensor,
    pub mask: Vec<bool>,
}

impl ContextSnapshot {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Mask as `0/1` weights.
    pub fn weights(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

/// What random seeding produced, so the caller can log and replay it.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub transitions: Vec<Transition>,
    pub obs: Vec<f64>,
    pub raw_return: f64,
    pub env_steps: usize,
    pub done: bool,
}

impl ContextBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "context capacity must be positive");
        Self { capacity, entries: VecDeque::with_capacity(capacity), pushes: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn valid_count(&self) -> usize {
        self.entries.len()
    }

    pub fn evictions(&self) -> u64 {
        self.pushes.saturating_sub(self.capacity as u64)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn entries(&self) -> impl Iterator<Item = &Transition> {
        self.entries.iter()
    }

    /// Appends `t`, evicting the oldest entry when full.
    ///
    /// # Panics
    /// If the transition has non-finite components.
    pub fn push(&mut self, t: Transition) {
        assert!(t.is_finite(), "context transition must be finite");
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(t);
        self.pushes += 1;
    }

    /// Exactly `capacity` rows of width `width`; real entries occupy the last
    /// rows in arrival order, leading rows are zero.
    pub fn snapshot(&self, width: usize, padding: Padding) -> ContextSnapshot {
        let missing = self.capacity - self.entries.len();
        let mut values = vec![0.0; self.capacity * width];
        for (k, t) in self.entries.iter().enumerate() {
            let flat = t.flatten();
            assert_eq!(flat.len(), width, "transition width mismatch");
            let row = missing + k;
            values[row * width..(row + 1) * width].copy_from_slice(&flat);
        }
        let mask = (0..self.capacity).map(|i| padding == Padding::Zeros || i >= missing).collect();
        let rows = Tensor::new(values, &[self.capacity, width]).expect("shape matches buffer");
        ContextSnapshot { rows, mask }
    }

    /// Runs `steps` control steps with uniform random actions from the
    /// environment's current observation, pushing each transition.
    pub fn seed_with_random(
        &mut self,
        env: &mut Environment,
        obs: Vec<f64>,
        steps: usize,
        action_repeat: usize,
        discount: f64,
        rng: &mut impl Rng,
    ) -> Result<SeedOutcome, EnvError> {
        let mut out = SeedOutcome { transitions: Vec::new(), obs, raw_return: 0.0, env_steps: 0, done: env.is_done() };
        for _ in 0..steps {
            if out.done {
                break;
            }
            let action = env.random_action(rng);
            let step = env.step_repeat(&action, action_repeat, discount)?;
            let t = Transition { obs: out.obs.clone(), action, reward: step.reward, next_obs: step.obs.clone() };
            self.push(t.clone());
            out.transitions.push(t);
            out.obs = step.obs;
            out.raw_return += step.raw_reward;
            out.env_steps += step.env_steps;
            out.done = step.done;
        }
        Ok(out)
    }
}
