use std::sync::Arc;
use std::time::Instant;

use crate::env::{
    reset, scripted_enemy_policy, step, team_metrics, Action, EnvConfig, Scenario,
    StepEvents, TeamMetrics, NUM_ACTIONS,
};
use crate::error::{Error, Result};
use crate::numeric::{argmax, Matrix, ParamStore, RngStream};

use super::config::{epsilon_at, Algorithm, TrainConfig};
use super::loss::{compute_losses, LossStats, LossWeights, PreparedBatch};
use super::network::{forward_pipeline, QNetwork, StepInput};
use super::replay::{ReplayBuffer, Transition};

/// Epsilon-greedy choice per agent; dead agents get `NoOp`.
pub fn select_actions(q: &Matrix, epsilon: f64, alive: &[bool], rng: &mut RngStream) -> Vec<Action> {
    (0..q.rows())
        .map(|i| {
            if !alive[i] {
                return Action::NoOp;
            }
            let idx = if epsilon > 0.0 && rng.next_f64() < epsilon {
                rng.below(NUM_ACTIONS)
            } else {
                argmax(q.row(i)).0
            };
            Action::from_index(idx).expect("index below NUM_ACTIONS")
        })
        .collect()
}

/// One row of the learning curve.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// Episode return averaged over the learning team.
    pub mean_reward: f64,
    pub epsilon: f64,
    /// Mean loss over the updates of this episode.
    pub loss: Option<f64>,
    pub metrics: TeamMetrics,
    pub steps: usize,
    pub updates: usize,
    pub wall_clock_ms: u128,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Policy {
    /// Epsilon-greedy on the local network, storing transitions and
    /// updating when `learn` is set.
    Train { learn: bool },
    /// Fixed epsilon, nothing stored.
    Evaluate { epsilon: f64 },
    Uniform,
}

/// Local and target networks, optimizer state, replay and RNG streams of
/// one training run.
pub struct Trainer {
    pub algorithm: Algorithm,
    pub env: EnvConfig,
    pub config: TrainConfig,
    pub net: QNetwork,
    pub local: ParamStore,
    pub target: ParamStore,
    velocity: Vec<Matrix>,
    replay: ReplayBuffer,
    action_rng: RngStream,
    gs_rng: RngStream,
    env_seeds: RngStream,
}

impl Trainer {
    pub fn new(env: EnvConfig, config: TrainConfig, algorithm: Algorithm) -> Result<Self> {
        env.validate()?;
        config.validate()?;
        let root = RngStream::new(config.seed);
        let (net, local) = QNetwork::new(algorithm, &config, env.obs_dim(), root.derive(10).seed())?;
        let target = local.clone();
        let velocity = local.ids().map(|id| Matrix::zeros(local.value(id).rows(), local.value(id).cols())).collect();
        Ok(Trainer {
            replay: ReplayBuffer::new(config.buffer_capacity, root.derive(11))?,
            action_rng: root.derive(12),
            gs_rng: root.derive(13),
            env_seeds: root.derive(14),
            algorithm,
            env,
            config,
            net,
            local,
            target,
            velocity,
        })
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn updates(&self) -> u64 {
        self.local.step()
    }

    pub fn weights(&self) -> LossWeights {
        let (alpha, beta, lambda) = self.config.blend_for(self.algorithm);
        LossWeights { alpha, beta, lambda }
    }

    /// Environment config of a 1-based episode.
    pub fn episode_env(&self, episode: usize) -> EnvConfig {
        EnvConfig {
            seed: self.env_seeds.derive(episode as u64).seed() ^ self.env.seed,
            ..self.env.clone()
        }
    }

    /// Samples a minibatch and applies one gradient step; `None` while the
    /// buffer holds fewer than `batch_size` transitions.
    pub fn train_step(&mut self) -> Result<Option<LossStats>> {
        let Some(idx) = self.replay.sample_indices(self.config.batch_size) else {
            return Ok(None);
        };
        let batch: Vec<&Transition> = idx.iter().map(|&i| self.replay.get(i).expect("sampled index")).collect();
        let prepared = PreparedBatch::new(&batch, self.config.network.neighbors)?;
        let graph = compute_losses(
            &self.net,
            &self.local,
            &self.target,
            &prepared,
            &self.config,
            self.weights(),
            &mut self.gs_rng,
        )?;
        self.local.zero_grads();
        graph.tape.backward(graph.loss, &mut self.local)?;
        self.apply_gradients();
        self.local.increment_step();
        if self.local.step() % self.config.target_sync_period == 0 {
            self.target.copy_values_from(&self.local)?;
        }
        Ok(Some(graph.stats))
    }

    fn apply_gradients(&mut self) {
        let lr = self.config.learning_rate;
        let mu = self.config.momentum;
        let ids: Vec<_> = self.local.ids().collect();
        for id in ids {
            let g = self.local.grad(id).clone();
            let v = &mut self.velocity[id.index()];
            let update = if mu > 0.0 {
                for (vi, gi) in v.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *vi = mu * *vi + gi;
                }
                v.as_slice()
            } else {
                g.as_slice()
            };
            for (w, u) in self.local.value_mut(id).as_mut_slice().iter_mut().zip(update) {
                *w -= lr * u;
            }
        }
    }

    /// Plays one episode. Training episodes store every step and, when
    /// `learn` is set, update after every step.
    pub fn run_episode(&mut self, episode: usize, policy: Policy) -> Result<EpisodeRecord> {
        let started = Instant::now();
        let env = self.episode_env(episode);
        let epsilon = match policy {
            Policy::Train { .. } => epsilon_at(episode, &self.config),
            Policy::Evaluate { epsilon } => epsilon,
            Policy::Uniform => 1.0,
        };
        let learners = env.learners();
        let mut state = Arc::new(reset(&env)?);
        let mut total = 0.0;
        let mut events: Vec<StepEvents> = Vec::new();
        let mut losses = Vec::new();
        while !state.is_done() {
            let alive = state.learner_alive();
            let actions = if policy == Policy::Uniform {
                select_actions(&Matrix::zeros(learners, NUM_ACTIONS), 1.0, &alive, &mut self.action_rng)
            } else {
                let input = StepInput::from_state(&state, self.config.network.neighbors)?;
                let q = forward_pipeline(&self.net, &self.local, &input)?.q;
                select_actions(&q, epsilon, &alive, &mut self.action_rng)
            };
            let mut joint = actions.clone();
            if env.scenario == Scenario::Battle {
                joint.extend(scripted_enemy_policy(&state));
            }
            let (next, result) = step(&state, &joint)?;
            let next = Arc::new(next);
            let rewards = result.rewards[..learners].to_vec();
            total += rewards.iter().sum::<f64>();
            events.push(result.events);
            if let Policy::Train { learn } = policy {
                let idx = actions.iter().map(|a| a.index()).collect();
                self.replay.push(Transition::new(state.clone(), next.clone(), idx, rewards, result.done)?);
                if learn {
                    if let Some(stats) = self.train_step()? {
                        if !stats.loss.is_finite() {
                            return Err(Error::NonFinite { op: "loss" });
                        }
                        losses.push(stats.loss);
                    }
                }
            }
            state = next;
        }
        Ok(EpisodeRecord {
            episode,
            mean_reward: total / learners as f64,
            epsilon,
            loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            metrics: team_metrics(env.scenario, learners, &events),
            steps: state.step_count(),
            updates: losses.len(),
            wall_clock_ms: started.elapsed().as_millis(),
        })
    }

    /// Runs every configured episode, handing each record to `on_episode`
    /// as soon as it is complete.
    pub fn run(&mut self, mut on_episode: impl FnMut(&EpisodeRecord) -> Result<()>) -> Result<Vec<EpisodeRecord>> {
        let mut records = Vec::with_capacity(self.config.episodes);
        for episode in 1..=self.config.episodes {
            let learn = episode >= self.config.train_start_episode;
            let record = self.run_episode(episode, Policy::Train { learn })?;
            on_episode(&record)?;
            records.push(record);
        }
        Ok(records)
    }
}

pub fn run_training(env: EnvConfig, config: TrainConfig, algorithm: Algorithm) -> Result<Vec<EpisodeRecord>> {
    Trainer::new(env, config, algorithm)?.run(|_| Ok(()))
}
