//! Desk-scale non-stationary control tasks.
//!
//! Two analytically integrable systems (a point mass and a torque-limited
//! pendulum) expose hidden parameters that a [`ChangeSchedule`] resamples
//! either at every reset or at a fixed period within the episode. The active
//! task is never part of the observation; only the oracle side channel
//! ([`EnvSpec::oracle_vector`]) reveals it.

mod pendulum;
mod pointmass;

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pendulum::{Skill, PENDULUM_MAX_TORQUE};
pub use pointmass::{POINTMASS_MAX_FORCE, POINTMASS_MAX_SPEED};

/// Integration step shared by both systems.
pub const DT: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("hidden parameter {param} does not exist in {env}")]
    UnsupportedParam { env: EnvId, param: HiddenParam },
    #[error("unknown environment id {0:?}")]
    UnknownEnv(String),
    #[error("action has {got} components, expected {expected}")]
    ActionWidth { expected: usize, got: usize },
    #[error("action component {0} is outside [-1, 1] or not finite")]
    ActionRange(f64),
    #[error("episode is done; reset before stepping")]
    EpisodeDone,
    #[error("invalid schedule: {0}")]
    Schedule(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvId {
    PointmassVelocity,
    PendulumNs,
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvId::PointmassVelocity => "pointmass-velocity",
            EnvId::PendulumNs => "pendulum-ns",
        })
    }
}

impl std::str::FromStr for EnvId {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, EnvError> {
        match s {
            "pointmass-velocity" => Ok(EnvId::PointmassVelocity),
            "pendulum-ns" => Ok(EnvId::PendulumNs),
            other => Err(EnvError::UnknownEnv(other.to_string())),
        }
    }
}

/// Hidden parameters an environment can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenParam {
    TargetVelocity,
    WindForce,
    ActuatorDeactivation,
    ActionPerturbation,
    MassScale,
    JointPerturbation,
    Friction,
    Skill,
}

impl HiddenParam {
    pub fn name(self) -> &'static str {
        match self {
            HiddenParam::TargetVelocity => "target_velocity",
            HiddenParam::WindForce => "wind_force",
            HiddenParam::ActuatorDeactivation => "actuator_deactivation",
            HiddenParam::ActionPerturbation => "action_perturbation",
            HiddenParam::MassScale => "mass_scale",
            HiddenParam::JointPerturbation => "joint_perturbation",
            HiddenParam::Friction => "friction",
            HiddenParam::Skill => "skill_id",
        }
    }

    pub fn is_objective(self) -> bool {
        matches!(self, HiddenParam::TargetVelocity | HiddenParam::Skill)
    }
}

impl fmt::Display for HiddenParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Dynamical,
    Objective,
    Combined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamValue {
    Scalar(f64),
    Vector(Vec<f64>),
    Choice { index: usize, count: usize },
}

/// Ground-truth description of the active task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub kind: ChangeKind,
    pub params: BTreeMap<HiddenParam, ParamValue>,
    pub oracle_vec: Vec<f64>,
}

impl TaskDescriptor {
    pub fn scalar(&self, p: HiddenParam) -> Option<f64> {
        match self.params.get(&p) {
            Some(ParamValue::Scalar(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn vector(&self, p: HiddenParam) -> Option<&[f64]> {
        match self.params.get(&p) {
            Some(ParamValue::Vector(v)) => Some(v),
            _ => None,
        }
    }

    pub fn choice(&self, p: HiddenParam) -> Option<usize> {
        match self.params.get(&p) {
            Some(ParamValue::Choice { index, .. }) => Some(*index),
            _ => None,
        }
    }

    /// Short human-readable label, e.g. `swingup` or `target_velocity=2.50`.
    pub fn label(&self) -> String {
        if self.params.is_empty() {
            return "nominal".to_string();
        }
        self.params
            .iter()
            .map(|(p, v)| match (p, v) {
                (HiddenParam::Skill, ParamValue::Choice { index, .. }) => Skill::ALL[*index].name().to_string(),
                (_, ParamValue::Scalar(x)) => format!("{p}={x:.2}"),
                (_, ParamValue::Vector(xs)) => {
                    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.2}")).collect();
                    format!("{p}=[{}]", parts.join(";"))
                }
                (_, ParamValue::Choice { index, .. }) => format!("{p}={index}"),
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// When the hidden task is redrawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    InterEpisodic,
    IntraEpisodic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeSchedule {
    pub mode: ScheduleMode,
    /// Environment steps between task changes (intra-episodic only).
    pub period_steps: usize,
    pub sampler_seed: u64,
}

impl ChangeSchedule {
    pub fn inter(seed: u64) -> Self {
        Self { mode: ScheduleMode::InterEpisodic, period_steps: 0, sampler_seed: seed }
    }

    pub fn intra(period_steps: usize, seed: u64) -> Self {
        Self { mode: ScheduleMode::IntraEpisodic, period_steps, sampler_seed: seed }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.mode == ScheduleMode::IntraEpisodic && self.period_steps == 0 {
            return Err(EnvError::Schedule("intra-episodic period must be positive"));
        }
        Ok(())
    }

    /// Whether the task is redrawn right after the step that brought the
    /// episode to `step_count`.
    pub fn changes_at(&self, step_count: usize) -> bool {
        self.mode == ScheduleMode::IntraEpisodic && step_count > 0 && step_count.is_multiple_of(self.period_steps)
    }
}

/// One control-level interaction tuple `(o, a, r, o')`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
}

impl Transition {
    /// Width of [`Transition::flatten`] for the given observation/action sizes.
    pub fn flat_width(obs_dim: usize, act_dim: usize) -> usize {
        2 * obs_dim + act_dim + 1
    }

    /// Concatenation `(o, a, r, o')`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::flat_width(self.obs.len(), self.action.len()));
        v.extend_from_slice(&self.obs);
        v.extend_from_slice(&self.action);
        v.push(self.reward);
        v.extend_from_slice(&self.next_obs);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.reward.is_finite()
            && self.obs.iter().chain(&self.action).chain(&self.next_obs).all(|x| x.is_finite())
    }
}

/// Static description of an environment instance: which system, which
/// hidden parameters vary, and the episode length in environment steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: EnvId,
    pub varying: Vec<HiddenParam>,
    pub episode_length: usize,
    /// Degrees of freedom of the point mass (ignored by the pendulum).
    pub dims: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub physical: Vec<f64>,
    pub step_count: usize,
    pub active_task: TaskDescriptor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

impl EnvSpec {
    pub fn new(id: EnvId, mut varying: Vec<HiddenParam>, episode_length: usize, dims: usize) -> Result<Self, EnvError> {
        varying.sort();
        varying.dedup();
        for &p in &varying {
            let ok = match id {
                EnvId::PointmassVelocity => matches!(
                    p,
                    HiddenParam::TargetVelocity
                        | HiddenParam::WindForce
                        | HiddenParam::ActuatorDeactivation
                        | HiddenParam::ActionPerturbation
                ),
                EnvId::PendulumNs => matches!(
                    p,
                    HiddenParam::MassScale | HiddenParam::JointPerturbation | HiddenParam::Friction | HiddenParam::Skill
                ),
            };
            if !ok {
                return Err(EnvError::UnsupportedParam { env: id, param: p });
            }
        }
        let dims = if id == EnvId::PendulumNs { 1 } else { dims.max(1) };
        Ok(Self { id, varying, episode_length, dims })
    }

    pub fn obs_dim(&self) -> usize {
        match self.id {
            EnvId::PointmassVelocity => self.dims,
            EnvId::PendulumNs => 3,
        }
    }

    pub fn act_dim(&self) -> usize {
        match self.id {
            EnvId::PointmassVelocity => self.dims,
            EnvId::PendulumNs => 1,
        }
    }

    pub fn kind(&self) -> ChangeKind {
        let objective = self.varying.iter().filter(|p| p.is_objective()).count();
        let dynamical = self.varying.len() - objective;
        match (objective, dynamical) {
            (0, d) if d <= 1 => ChangeKind::Dynamical,
            (_, 0) => ChangeKind::Objective,
            _ => ChangeKind::Combined,
        }
    }

    /// Closed sampling interval of a continuous parameter.
    pub fn range(&self, p: HiddenParam) -> Option<(f64, f64)> {
        match p {
            HiddenParam::TargetVelocity => Some((-6.0, 6.0)),
            HiddenParam::WindForce => Some((-10.0, 10.0)),
            HiddenParam::ActionPerturbation => Some((-0.5 * POINTMASS_MAX_FORCE, 0.5 * POINTMASS_MAX_FORCE)),
            HiddenParam::MassScale => Some((0.1, 2.5)),
            HiddenParam::JointPerturbation => Some((-0.5 * PENDULUM_MAX_TORQUE, 0.5 * PENDULUM_MAX_TORQUE)),
            HiddenParam::Friction => Some((0.1, 3.9)),
            HiddenParam::ActuatorDeactivation | HiddenParam::Skill => None,
        }
    }

    fn choice_count(&self, p: HiddenParam) -> usize {
        match p {
            HiddenParam::ActuatorDeactivation => self.dims,
            HiddenParam::Skill => Skill::ALL.len(),
            _ => 0,
        }
    }

    fn is_vector(&self, p: HiddenParam) -> bool {
        matches!(p, HiddenParam::WindForce | HiddenParam::ActionPerturbation)
    }

    /// Draws every varying parameter uniformly from its range.
    pub fn sample_task(&self, rng: &mut impl Rng) -> TaskDescriptor {
        let mut params = BTreeMap::new();
        for &p in &self.varying {
            let value = if let Some((lo, hi)) = self.range(p) {
                if self.is_vector(p) {
                    ParamValue::Vector((0..self.dims).map(|_| rng.random_range(lo..=hi)).collect())
                } else {
                    ParamValue::Scalar(rng.random_range(lo..=hi))
                }
            } else {
                let count = self.choice_count(p);
                ParamValue::Choice { index: rng.random_range(0..count), count }
            };
            params.insert(p, value);
        }
        self.task_from_params(params)
    }

    pub fn task_from_params(&self, params: BTreeMap<HiddenParam, ParamValue>) -> TaskDescriptor {
        let mut task = TaskDescriptor { kind: self.kind(), params, oracle_vec: Vec::new() };
        task.oracle_vec = self.oracle_vector(&task);
        task
    }

    /// Fixed-order encoding of the varying parameters: continuous values raw,
    /// discrete choices one-hot.
    pub fn oracle_vector(&self, task: &TaskDescriptor) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.oracle_dim());
        for &p in &self.varying {
            match task.params.get(&p) {
                Some(ParamValue::Scalar(v)) => out.push(*v),
                Some(ParamValue::Vector(v)) => out.extend_from_slice(v),
                Some(ParamValue::Choice { index, count }) => {
                    out.extend((0..*count).map(|i| if i == *index { 1.0 } else { 0.0 }));
                }
                None => {
                    let width = if self.range(p).is_some() {
                        if self.is_vector(p) {
                            self.dims
                        } else {
                            1
                        }
                    } else {
                        self.choice_count(p)
                    };
                    out.extend(std::iter::repeat_n(0.0, width));
                }
            }
        }
        out
    }

    pub fn oracle_dim(&self) -> usize {
        self.varying
            .iter()
            .map(|&p| match self.range(p) {
                Some(_) if self.is_vector(p) => self.dims,
                Some(_) => 1,
                None => self.choice_count(p),
            })
            .sum()
    }

    fn initial_physical(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self.id {
            EnvId::PointmassVelocity => pointmass::initial_state(self.dims, rng),
            EnvId::PendulumNs => pendulum::initial_state(rng),
        }
    }

    /// Observation emitted for a physical state.
    pub fn observe(&self, physical: &[f64]) -> Vec<f64> {
        match self.id {
            EnvId::PointmassVelocity => pointmass::observe(physical, self.dims),
            EnvId::PendulumNs => pendulum::observe(physical),
        }
    }

    /// One deterministic integration step under `task`; returns the next
    /// physical state and the reward.
    pub fn dynamics(&self, physical: &[f64], action: &[f64], task: &TaskDescriptor) -> (Vec<f64>, f64) {
        match self.id {
            EnvId::PointmassVelocity => pointmass::step(physical, action, task, self.dims),
            EnvId::PendulumNs => pendulum::step(physical, action, task),
        }
    }

    /// Starts an episode. Both schedule modes draw the episode's first task
    /// here; intra-episodic schedules additionally redraw it every
    /// `period_steps` steps.
    pub fn reset(&self, schedule: &ChangeSchedule, rng: &mut impl Rng) -> Result<(EnvState, Vec<f64>), EnvError> {
        schedule.validate()?;
        let active_task = self.sample_task(rng);
        let physical = self.initial_physical(rng);
        let obs = self.observe(&physical);
        Ok((EnvState { physical, step_count: 0, active_task }, obs))
    }

    pub fn step(
        &self,
        state: &EnvState,
        action: &[f64],
        schedule: &ChangeSchedule,
        rng: &mut impl Rng,
    ) -> Result<(EnvState, StepOutcome), EnvError> {
        if state.step_count >= self.episode_length {
            return Err(EnvError::EpisodeDone);
        }
        if action.len() != self.act_dim() {
            return Err(EnvError::ActionWidth { expected: self.act_dim(), got: action.len() });
        }
        if let Some(&bad) = action.iter().find(|a| !a.is_finite() || a.abs() > 1.0) {
            return Err(EnvError::ActionRange(bad));
        }
        let (physical, reward) = self.dynamics(&state.physical, action, &state.active_task);
        let step_count = state.step_count + 1;
        let done = step_count >= self.episode_length;
        let active_task = if !done && schedule.changes_at(step_count) {
            self.sample_task(rng)
        } else {
            state.active_task.clone()
        };
        let obs = self.observe(&physical);
        Ok((EnvState { physical, step_count, active_task }, StepOutcome { obs, reward, done }))
    }
}

/// Result of applying one action for several environment steps.
#[derive(Clone, Debug, PartialEq)]
pub struct RepeatedStep {
    pub obs: Vec<f64>,
    /// `Σ_k γ^(k−1) r_k` over the executed sub-steps.
    pub reward: f64,
    /// Plain sum of the sub-step rewards.
    pub raw_reward: f64,
    pub env_steps: usize,
    pub done: bool,
}

/// Stateful environment: spec, schedule, its private sampler and the
/// current episode state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    spec: EnvSpec,
    schedule: ChangeSchedule,
    rng: ChaCha8Rng,
    state: Option<EnvState>,
    /// Task forced for the next reset, bypassing the sampler.
    pending_task: Option<TaskDescriptor>,
}

impl Environment {
    pub fn new(spec: EnvSpec, schedule: ChangeSchedule) -> Result<Self, EnvError> {
        schedule.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(schedule.sampler_seed);
        Ok(Self { spec, schedule, rng, state: None, pending_task: None })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &ChangeSchedule {
        &self.schedule
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    pub fn active_task(&self) -> Option<&TaskDescriptor> {
        self.state.as_ref().map(|s| &s.active_task)
    }

    pub fn is_done(&self) -> bool {
        self.state.as_ref().is_none_or(|s| s.step_count >= self.spec.episode_length)
    }

    pub fn reset(&mut self) -> Vec<f64> {
        let (mut state, obs) = self.spec.reset(&self.schedule, &mut self.rng).expect("schedule validated at construction");
        if let Some(task) = self.pending_task.take() {
            state.active_task = task;
        }
        self.state = Some(state);
        obs
    }

    /// Uses `task` for the next episode instead of a sampled one.
    pub fn force_next_task(&mut self, task: TaskDescriptor) {
        self.pending_task = Some(task);
    }

    /// Replaces the active task mid-episode (scripted switch for probes).
    pub fn switch_task(&mut self, task: TaskDescriptor) {
        if let Some(s) = self.state.as_mut() {
            s.active_task = task;
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        let state = self.state.as_ref().ok_or(EnvError::EpisodeDone)?;
        let (next, out) = self.spec.step(state, action, &self.schedule, &mut self.rng)?;
        self.state = Some(next);
        Ok(out)
    }

    /// Applies `action` up to `repeat` times (stopping at episode end).
    pub fn step_repeat(&mut self, action: &[f64], repeat: usize, discount: f64) -> Result<RepeatedStep, EnvError> {
        let mut reward = 0.0;
        let mut raw_reward = 0.0;
        let mut weight = 1.0;
        let mut last = None;
        let mut env_steps = 0;
        for _ in 0..repeat.max(1) {
            let out = self.step(action)?;
            reward += weight * out.reward;
            raw_reward += out.reward;
            weight *= discount;
            env_steps += 1;
            let done = out.done;
            last = Some(out);
            if done {
                break;
            }
        }
        let last = last.expect("at least one step");
        Ok(RepeatedStep { obs: last.obs, reward, raw_reward, env_steps, done: last.done })
    }

    /// Uniform random action in `[-1, 1]^A`.
    pub fn random_action(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.spec.act_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect()
    }
}
