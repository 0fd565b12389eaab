use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::TargetUpdate;
use crate::context::Padding;
use crate::envs::{ChangeSchedule, EnvId, EnvSpec, HiddenParam, ScheduleMode};

/// Where the conditioning vector comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentVariant {
    /// No conditioning.
    Vanilla,
    /// Belief inferred from the context set.
    Taskinfer,
    /// Ground-truth task vector.
    Oracle,
}

impl AgentVariant {
    pub fn name(self) -> &'static str {
        match self {
            AgentVariant::Vanilla => "vanilla",
            AgentVariant::Taskinfer => "taskinfer",
            AgentVariant::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid value for `{key}`: {reason}")]
pub struct ConfigError {
    pub key: &'static str,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunConfig,
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub agent_variant: AgentVariant,
    /// Training stops once this many environment steps were taken.
    pub total_env_steps: u64,
    /// Epochs between checkpoints; 0 disables them.
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub id: EnvId,
    pub varying: Vec<HiddenParam>,
    pub dims: usize,
    pub episode_length: usize,
    pub schedule: ScheduleMode,
    pub period_steps: usize,
    pub padding: Padding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub deter: usize,
    pub stoch: usize,
    pub hidden: usize,
    pub embed: usize,
    pub latent_dim: usize,
    pub encoder_units: usize,
    pub actor_layers: usize,
    pub critic_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed_episodes: usize,
    pub collect_interval: usize,
    pub batch_size: usize,
    pub sequence_length: usize,
    pub context_size: usize,
    pub horizon: usize,
    pub model_lr: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub discount: f64,
    pub lambda: f64,
    pub kl_balance: f64,
    pub kl_scale: f64,
    pub reward_scale: f64,
    pub exploration_noise: f64,
    pub target_update: TargetUpdate,
    pub action_repeat: usize,
    pub grad_clip: f64,
    /// Random-action control steps that open every episode.
    pub context_seed_steps: usize,
    /// Imagination start states drawn per update; 0 uses every posterior state.
    pub imagine_starts: usize,
    pub replay_capacity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub every: u64,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 0, agent_variant: AgentVariant::Taskinfer, total_env_steps: 100_000, checkpoint_every: 10 }
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            id: EnvId::PointmassVelocity,
            varying: vec![HiddenParam::TargetVelocity],
            dims: 1,
            episode_length: 200,
            schedule: ScheduleMode::InterEpisodic,
            period_steps: 50,
            padding: Padding::Mask,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            deter: 200,
            stoch: 30,
            hidden: 200,
            embed: 200,
            latent_dim: 20,
            encoder_units: 240,
            actor_layers: 2,
            critic_layers: 2,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed_episodes: 5,
            collect_interval: 100,
            batch_size: 50,
            sequence_length: 50,
            context_size: 20,
            horizon: 15,
            model_lr: 6e-4,
            actor_lr: 8e-5,
            critic_lr: 8e-5,
            discount: 0.99,
            lambda: 0.95,
            kl_balance: 0.8,
            kl_scale: 1.0,
            reward_scale: 1.0,
            exploration_noise: 0.3,
            target_update: TargetUpdate::default(),
            action_repeat: 2,
            grad_clip: 100.0,
            context_seed_steps: 20,
            imagine_starts: 0,
            replay_capacity: 1_000_000,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { every: 25, episodes: 10, seed: 1_000_003 }
    }
}

fn positive(key: &'static str, v: usize) -> Result<(), ConfigError> {
    if v == 0 {
        return Err(ConfigError { key, reason: "must be at least 1".into() });
    }
    Ok(())
}

fn unit_interval(key: &'static str, v: f64) -> Result<(), ConfigError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(ConfigError { key, reason: format!("{v} is outside [0, 1]") });
    }
    Ok(())
}

fn positive_f(key: &'static str, v: f64) -> Result<(), ConfigError> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(ConfigError { key, reason: format!("{v} must be positive") });
    }
    Ok(())
}

impl Config {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.train;
        positive("horizon", t.horizon)?;
        positive("seed_episodes", t.seed_episodes)?;
        positive("collect_interval", t.collect_interval)?;
        positive("batch_size", t.batch_size)?;
        positive("sequence_length", t.sequence_length)?;
        positive("context_size", t.context_size)?;
        positive("action_repeat", t.action_repeat)?;
        positive("replay_capacity", t.replay_capacity)?;
        positive_f("model_lr", t.model_lr)?;
        positive_f("actor_lr", t.actor_lr)?;
        positive_f("critic_lr", t.critic_lr)?;
        positive_f("grad_clip", t.grad_clip)?;
        unit_interval("discount", t.discount)?;
        unit_interval("lambda", t.lambda)?;
        unit_interval("kl_balance", t.kl_balance)?;
        if !(t.exploration_noise >= 0.0) {
            return Err(ConfigError { key: "exploration_noise", reason: "must be non-negative".into() });
        }
        if !(t.reward_scale >= 0.0 && t.kl_scale >= 0.0) {
            return Err(ConfigError { key: "reward_scale", reason: "loss weights must be non-negative".into() });
        }
        match t.target_update {
            TargetUpdate::Soft { tau } => unit_interval("target_update", tau)?,
            TargetUpdate::Hard { every: 0 } => {
                return Err(ConfigError { key: "target_update", reason: "hard update period must be positive".into() });
            }
            TargetUpdate::Hard { .. } => {}
        }
        let m = &self.model;
        for (k, v) in [
            ("deter", m.deter),
            ("stoch", m.stoch),
            ("hidden", m.hidden),
            ("embed", m.embed),
            ("latent_dim", m.latent_dim),
            ("encoder_units", m.encoder_units),
            ("actor_layers", m.actor_layers),
            ("critic_layers", m.critic_layers),
        ] {
            positive(k, v)?;
        }
        positive("episode_length", self.env.episode_length)?;
        if self.env.schedule == ScheduleMode::IntraEpisodic {
            positive("period_steps", self.env.period_steps)?;
        }
        let control = self.control_steps();
        if t.sequence_length > control {
            return Err(ConfigError {
                key: "sequence_length",
                reason: format!("{} exceeds the {control} control steps of an episode", t.sequence_length),
            });
        }
        if self.env.varying.is_empty() && self.run.agent_variant == AgentVariant::Oracle {
            return Err(ConfigError { key: "varying", reason: "the oracle needs at least one varying parameter".into() });
        }
        positive("eval.episodes", self.eval.episodes)?;
        if self.eval.every == 0 {
            return Err(ConfigError { key: "eval.every", reason: "must be at least 1".into() });
        }
        self.env_spec().map_err(|e| ConfigError { key: "varying", reason: e.to_string() })?;
        Ok(())
    }

    /// Control decisions per episode.
    pub fn control_steps(&self) -> usize {
        self.env.episode_length.div_ceil(self.train.action_repeat.max(1))
    }

    pub fn env_spec(&self) -> Result<EnvSpec, crate::envs::EnvError> {
        EnvSpec::new(self.env.id, self.env.varying.clone(), self.env.episode_length, self.env.dims)
    }

    pub fn schedule(&self, seed: u64) -> ChangeSchedule {
        ChangeSchedule { mode: self.env.schedule, period_steps: self.env.period_steps, sampler_seed: seed }
    }
}
