//! Interaction, model learning and behavior learning loop.

mod agent;
mod config;
mod replay;

pub use agent::{Agent, BehaviorLosses, StartStates};
pub use config::{
    AgentVariant, Config, ConfigError, EnvConfig, EvalConfig, ModelConfig, RunConfig, TrainConfig,
};
pub use replay::{Episode, ReplayBuffer, ReplayError, TrainingBatch};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextBuffer, Padding};
use crate::diffmath::{DiffError, NoiseSource};
use crate::envs::{EnvError, Environment, TaskDescriptor, Transition};
use crate::worldmodel::{ElboTerms, RssmState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Math(#[from] DiffError),
}

/// How actions are chosen during an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    /// Uniform random actions throughout.
    Random,
    /// Sampled actions plus Gaussian exploration noise.
    Explore,
    /// Actor mode and belief mean.
    Greedy,
}

#[derive(Clone, Debug)]
pub struct EpisodeOptions {
    pub policy: Policy,
    pub record_latents: bool,
    /// Replace the active task just before this control step.
    pub switch_at: Option<(usize, TaskDescriptor)>,
}

impl EpisodeOptions {
    pub fn new(policy: Policy) -> Self {
        Self { policy, record_latents: false, switch_at: None }
    }
}

/// Belief mean and recurrent feature at one control step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub episode_id: u64,
    pub step: usize,
    pub task_label: String,
    /// Belief mean (oracle vector for the oracle agent, absent for vanilla).
    pub mu_l: Option<Vec<f64>>,
    pub feat: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EpisodeReport {
    pub episode: Episode,
    pub raw_return: f64,
    pub env_steps: usize,
    pub latents: Vec<LatentRow>,
}

/// RNG streams consumed while acting.
pub struct ActingRng<'a> {
    pub actions: &'a mut ChaCha8Rng,
    pub noise: &'a mut NoiseSource,
}

/// Runs one episode from a fresh reset of `env`.
pub fn play_episode(
    agent: &Agent,
    env: &mut Environment,
    cfg: &Config,
    rngs: ActingRng<'_>,
    opts: &EpisodeOptions,
) -> Result<EpisodeReport, TrainError> {
    let t = &cfg.train;
    let spec = env.spec().clone();
    let width = Transition::flat_width(spec.obs_dim(), spec.act_dim());
    let mut obs = env.reset();
    let mut context = ContextBuffer::new(t.context_size);
    let mut state = RssmState::zeros(&agent.world.dims, 1);
    let mut prev_action = vec![0.0; spec.act_dim()];
    let mut report = EpisodeReport { episode: Episode::new(0), raw_return: 0.0, env_steps: 0, latents: Vec::new() };

    let mut step = 0;
    while !env.is_done() {
        if let Some((at, task)) = &opts.switch_at {
            if *at == step {
                env.switch_task(task.clone());
            }
        }
        let task = env.active_task().expect("episode running").clone();
        let label = task.label();
        let action = if opts.policy == Policy::Random {
            env.random_action(rngs.actions)
        } else {
            let belief = agent.belief(&context.snapshot(width, cfg.env.padding))?;
            let draw = (opts.policy == Policy::Explore).then_some(&mut *rngs.noise);
            let l = agent.task_vector(belief.as_ref(), &task.oracle_vec, draw);
            state = agent.filter(&state, &prev_action, &obs, l.as_deref())?;
            if opts.record_latents {
                let mu_l = match agent.variant {
                    AgentVariant::Vanilla => None,
                    AgentVariant::Oracle => Some(task.oracle_vec.clone()),
                    AgentVariant::Taskinfer => belief.as_ref().map(|b| b.mu_l.clone()),
                };
                report.latents.push(LatentRow {
                    episode_id: 0,
                    step,
                    task_label: label.clone(),
                    mu_l,
                    feat: state.feature(),
                });
            }
            if step < t.context_seed_steps {
                env.random_action(rngs.actions)
            } else if opts.policy == Policy::Explore {
                let mut a = agent.act(&state, l.as_deref(), Some(&mut *rngs.noise))?;
                for x in &mut a {
                    let eps: f64 = rngs.noise.rng().sample(StandardNormal);
                    *x = (*x + t.exploration_noise * eps).clamp(-1.0, 1.0);
                }
                a
            } else {
                agent.act(&state, l.as_deref(), None)?
            }
        };
        let out = env.step_repeat(&action, t.action_repeat, t.discount)?;
        let tr = Transition { obs: obs.clone(), action: action.clone(), reward: out.reward, next_obs: out.obs.clone() };
        context.push(tr.clone());
        report.episode.push(tr, task.oracle_vec.clone(), label);
        report.raw_return += out.raw_reward;
        report.env_steps += out.env_steps;
        obs = out.obs;
        prev_action = action;
        step += 1;
    }
    Ok(report)
}

/// Per-epoch log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: u64,
    pub env_steps: u64,
    pub train_return: f64,
    pub recon_obs: f64,
    pub recon_reward: f64,
    pub kl: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub eval_mean_return: Option<f64>,
    pub eval_return_std: Option<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub latents: Vec<LatentRow>,
}

impl EvalReport {
    pub fn mean_return(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len().max(1) as f64
    }

    /// Population standard deviation of the episode returns.
    pub fn std_return(&self) -> f64 {
        let m = self.mean_return();
        let n = self.returns.len().max(1) as f64;
        (self.returns.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / n).sqrt()
    }
}

/// Complete training state; serialising it is a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trainer {
    pub cfg: Config,
    pub agent: Agent,
    pub replay: ReplayBuffer,
    env: Environment,
    rng: ChaCha8Rng,
    model_noise: NoiseSource,
    behavior_noise: NoiseSource,
    act_noise: NoiseSource,
    pub epoch: u64,
    pub env_steps: u64,
}

impl Trainer {
    pub fn new(cfg: Config) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut root = ChaCha8Rng::seed_from_u64(cfg.run.seed);
        let spec = cfg.env_spec()?;
        let env = Environment::new(spec.clone(), cfg.schedule(root.random()))?;
        let mut init = ChaCha8Rng::seed_from_u64(root.random());
        let agent = Agent::new(&cfg, spec.obs_dim(), spec.act_dim(), spec.oracle_dim(), &mut init);
        let rng = ChaCha8Rng::seed_from_u64(root.random());
        let model_noise = NoiseSource::new(root.random());
        let behavior_noise = NoiseSource::new(root.random());
        let act_noise = NoiseSource::new(root.random());
        let replay = ReplayBuffer::new(cfg.train.replay_capacity);
        Ok(Self { cfg, agent, replay, env, rng, model_noise, behavior_noise, act_noise, epoch: 0, env_steps: 0 })
    }

    pub fn is_finished(&self) -> bool {
        self.env_steps >= self.cfg.run.total_env_steps
    }

    fn interact(&mut self, policy: Policy) -> Result<f64, TrainError> {
        let rngs = ActingRng { actions: &mut self.rng, noise: &mut self.act_noise };
        let report = play_episode(&self.agent, &mut self.env, &self.cfg, rngs, &EpisodeOptions::new(policy))?;
        self.env_steps += report.env_steps as u64;
        self.replay.add(report.episode);
        Ok(report.raw_return)
    }

    /// Fills the replay buffer with random-action episodes; a no-op once
    /// they exist.
    pub fn collect_seed_episodes(&mut self) -> Result<(), TrainError> {
        while self.replay.episode_count() < self.cfg.train.seed_episodes && self.epoch == 0 {
            self.interact(Policy::Random)?;
        }
        Ok(())
    }

    pub fn sample_batch(&mut self) -> Result<TrainingBatch, TrainError> {
        let t = &self.cfg.train;
        let oracle_dim = if self.agent.variant == AgentVariant::Oracle { self.agent.task_dim() } else { 0 };
        Ok(self.replay.sample(
            t.batch_size,
            t.sequence_length,
            t.context_size,
            self.cfg.env.padding == Padding::Zeros,
            oracle_dim,
            &mut self.rng,
        )?)
    }

    /// One model step followed by one behavior step.
    pub fn update(&mut self) -> Result<(ElboTerms, BehaviorLosses), TrainError> {
        let batch = self.sample_batch()?;
        let (elbo, starts) = self.agent.dynamics_update(&batch, &self.cfg, &mut self.model_noise)?;
        let losses = self.agent.behavior_update(&starts, &self.cfg, &mut self.rng, &mut self.behavior_noise)?;
        Ok((elbo, losses))
    }

    /// `collect_interval` updates, one exploration episode and, every
    /// `eval.every` epochs, an evaluation.
    pub fn train_epoch(&mut self) -> Result<MetricsRecord, TrainError> {
        let clock = std::time::Instant::now();
        self.collect_seed_episodes()?;
        let c = self.cfg.train.collect_interval;
        let mut sums = [0.0; 5];
        for _ in 0..c {
            let (e, b) = self.update()?;
            for (s, v) in sums.iter_mut().zip([e.recon_obs, e.recon_reward, e.kl_reg, b.actor, b.critic]) {
                *s += v / c as f64;
            }
        }
        let train_return = self.interact(Policy::Explore)?;
        self.epoch += 1;
        let (eval_mean_return, eval_return_std) = if self.epoch.is_multiple_of(self.cfg.eval.every) {
            let r = self.evaluate(self.cfg.eval.episodes, false)?;
            (Some(r.mean_return()), Some(r.std_return()))
        } else {
            (None, None)
        };
        Ok(MetricsRecord {
            epoch: self.epoch,
            env_steps: self.env_steps,
            train_return,
            recon_obs: sums[0],
            recon_reward: sums[1],
            kl: sums[2],
            actor_loss: sums[3],
            critic_loss: sums[4],
            eval_mean_return,
            eval_return_std,
            wall_time: clock.elapsed().as_secs_f64(),
        })
    }

    /// Greedy episodes on the fixed evaluation task sequence. Leaves the
    /// training streams untouched.
    pub fn evaluate(&self, episodes: usize, record_latents: bool) -> Result<EvalReport, TrainError> {
        let mut opts = EpisodeOptions::new(Policy::Greedy);
        opts.record_latents = record_latents;
        self.evaluate_with(episodes, &opts)
    }

    pub fn evaluate_with(&self, episodes: usize, opts: &EpisodeOptions) -> Result<EvalReport, TrainError> {
        let seed = self.cfg.eval.seed;
        let mut env = Environment::new(self.env.spec().clone(), self.cfg.schedule(seed))?;
        let mut actions = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut noise = NoiseSource::new(seed.wrapping_add(1));
        let mut out = EvalReport { returns: Vec::with_capacity(episodes), latents: Vec::new() };
        for ep in 0..episodes {
            let rngs = ActingRng { actions: &mut actions, noise: &mut noise };
            let report = play_episode(&self.agent, &mut env, &self.cfg, rngs, opts)?;
            out.returns.push(report.raw_return);
            out.latents.extend(report.latents.into_iter().map(|mut r| {
                r.episode_id = ep as u64;
                r
            }));
        }
        Ok(out)
    }
}
