use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::Transition;
use crate::Tensor;

/// One stored episode of control-level transitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    pub transitions: Vec<Transition>,
    /// Oracle vector of the task active when each transition was taken.
    pub oracle: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

impl Episode {
    pub fn new(id: u64) -> Self {
        Self { id, transitions: Vec::new(), oracle: Vec::new(), labels: Vec::new() }
    }

    pub fn push(&mut self, t: Transition, oracle: Vec<f64>, label: String) {
        self.transitions.push(t);
        self.oracle.push(oracle);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplayError {
    #[error("no stored episode has {needed} transitions")]
    InsufficientData { needed: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    steps: usize,
    next_id: u64,
}

/// Training sequences with their preceding context sets.
///
/// `obs[t]` is `[B, O]` for `t = 0..=L`; `prev_actions[t]` is the action that
/// led to `obs[t]` (zero for `t = 0`); `rewards[t]` is `[B, 1]` for the
/// transition from `obs[t]` to `obs[t + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub obs: Vec<Tensor>,
    pub prev_actions: Vec<Tensor>,
    pub rewards: Vec<Tensor>,
    /// `[B·N, W]`, set `b` occupying rows `b·N..(b+1)·N`, oldest first.
    pub context: Tensor,
    /// One 0/1 weight per context row.
    pub context_weights: Vec<f64>,
    /// `[B, D_oracle]`, task active at each chunk's first transition.
    pub oracle: Tensor,
    pub episode_ids: Vec<u64>,
    pub starts: Vec<usize>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, episodes: VecDeque::new(), steps: 0, next_id: 0 }
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Stores a finished episode, evicting the oldest ones beyond capacity.
    pub fn add(&mut self, mut episode: Episode) {
        episode.id = self.next_id;
        self.next_id += 1;
        self.steps += episode.len();
        self.episodes.push_back(episode);
        while self.steps > self.capacity && self.episodes.len() > 1 {
            let old = self.episodes.pop_front().expect("non-empty");
            self.steps -= old.len();
        }
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Draws `batch` chunks of `length` transitions, each with the `context`
    /// transitions that precede it in the same episode.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        &self,
        batch: usize,
        length: usize,
        context: usize,
        zero_padding_is_data: bool,
        oracle_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<TrainingBatch, ReplayError> {
        let eligible: Vec<&Episode> = self.episodes.iter().filter(|e| e.len() >= length).collect();
        if eligible.is_empty() {
            return Err(ReplayError::InsufficientData { needed: length });
        }
        let first = &eligible[0].transitions[0];
        let (od, ad) = (first.obs.len(), first.action.len());
        let width = Transition::flat_width(od, ad);

        let mut obs = vec![vec![0.0; batch * od]; length + 1];
        let mut prev_actions = vec![vec![0.0; batch * ad]; length + 1];
        let mut rewards = vec![vec![0.0; batch]; length];
        let mut ctx = vec![0.0; batch * context * width];
        let mut weights = vec![0.0; batch * context];
        let mut oracle = vec![0.0; batch * oracle_dim];
        let mut episode_ids = Vec::with_capacity(batch);
        let mut starts = Vec::with_capacity(batch);

        for b in 0..batch {
            let ep = eligible[rng.random_range(0..eligible.len())];
            let k = rng.random_range(0..=ep.len() - length);
            episode_ids.push(ep.id);
            starts.push(k);
            for j in 0..length {
                let t = &ep.transitions[k + j];
                obs[j][b * od..(b + 1) * od].copy_from_slice(&t.obs);
                prev_actions[j + 1][b * ad..(b + 1) * ad].copy_from_slice(&t.action);
                rewards[j][b] = t.reward;
            }
            let last = &ep.transitions[k + length - 1];
            obs[length][b * od..(b + 1) * od].copy_from_slice(&last.next_obs);

            let available = k.min(context);
            let pad = context - available;
            for (slot, t) in ep.transitions[k - available..k].iter().enumerate() {
                let row = b * context + pad + slot;
                ctx[row * width..(row + 1) * width].copy_from_slice(&t.flatten());
                weights[row] = 1.0;
            }
            if zero_padding_is_data {
                weights[b * context..(b + 1) * context].fill(1.0);
            }
            if oracle_dim > 0 {
                oracle[b * oracle_dim..(b + 1) * oracle_dim].copy_from_slice(&ep.oracle[k]);
            }
        }
        let mk = |v: Vec<f64>, cols: usize| Tensor::matrix(batch, cols, v).expect("consistent batch");
        Ok(TrainingBatch {
            obs: obs.into_iter().map(|v| mk(v, od)).collect(),
            prev_actions: prev_actions.into_iter().map(|v| mk(v, ad)).collect(),
            rewards: rewards.into_iter().map(|v| mk(v, 1)).collect(),
            context: Tensor::matrix(batch * context, width, ctx).expect("consistent context"),
            context_weights: weights,
            oracle: mk(oracle, oracle_dim),
            episode_ids,
            starts,
        })
    }
}
