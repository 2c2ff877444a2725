use std::sync::Arc;

use crate::env::EnvState;
use crate::error::{Error, Result};
use crate::numeric::RngStream;

/// One environment step of the learning team. Observations and graphs are
/// rebuilt from the two world snapshots on demand; consecutive transitions
/// share their snapshot.
#[derive(Clone, Debug)]
pub struct Transition {
    pub state: Arc<EnvState>,
    pub next_state: Arc<EnvState>,
    /// Action index per learner.
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// The episode ended at `t + 1`.
    pub terminal: bool,
    /// Filled in when the following step of the same episode is stored.
    pub next_actions: Option<Vec<usize>>,
    pub next_rewards: Option<Vec<f64>>,
}

impl Transition {
    pub fn new(
        state: Arc<EnvState>,
        next_state: Arc<EnvState>,
        actions: Vec<usize>,
        rewards: Vec<f64>,
        terminal: bool,
    ) -> Result<Self> {
        let n = state.config().learners();
        if actions.len() != n || rewards.len() != n || next_state.config().learners() != n {
            return Err(Error::dim(
                "transition",
                format!("{} actions, {} rewards for {n} learners", actions.len(), rewards.len()),
            ));
        }
        Ok(Transition {
            state,
            next_state,
            actions,
            rewards,
            terminal,
            next_actions: None,
            next_rewards: None,
        })
    }

    pub fn alive(&self) -> Vec<bool> {
        self.state.learner_alive()
    }

    pub fn alive_next(&self) -> Vec<bool> {
        self.next_state.learner_alive()
    }
}

/// Fixed-capacity ring of transitions with its own sampling stream.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
    last: Option<usize>,
    rng: RngStream,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, rng: RngStream) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Validation("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
            last: None,
            rng,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if let Some(prev) = self.last.and_then(|i| self.items.get_mut(i)) {
            if !prev.terminal && Arc::ptr_eq(&prev.next_state, &t.state) {
                prev.next_actions = Some(t.actions.clone());
                prev.next_rewards = Some(t.rewards.clone());
            }
        }
        let slot = if self.items.len() < self.capacity {
            self.items.push(t);
            self.items.len() - 1
        } else {
            self.items[self.head] = t;
            self.head
        };
        self.head = (slot + 1) % self.capacity;
        self.last = Some(slot);
    }

    /// `k` distinct transitions drawn uniformly, or `None` when fewer than
    /// `k` are stored.
    pub fn sample(&mut self, k: usize) -> Option<Vec<&Transition>> {
        if k > self.items.len() {
            return None;
        }
        let idx = self.rng.sample_indices(self.items.len(), k);
        Some(idx.into_iter().map(|i| &self.items[i]).collect())
    }

    pub fn sample_indices(&mut self, k: usize) -> Option<Vec<usize>> {
        (k <= self.items.len()).then(|| self.rng.sample_indices(self.items.len(), k))
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }
}
