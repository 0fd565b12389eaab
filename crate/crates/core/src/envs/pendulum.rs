use std::f64::consts::PI;

use rand::Rng;

use super::{HiddenParam, TaskDescriptor, DT};

pub const PENDULUM_MAX_TORQUE: f64 = 3.0;
const GRAVITY: f64 = 10.0;
const LENGTH: f64 = 1.0;
const MAX_SPEED: f64 = 8.0;
const NOMINAL_FRICTION: f64 = 1.9;
const FRICTION_GAIN: f64 = 0.05;

/// Rewarded behaviour of the pendulum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Skill {
    Swingup,
    SpinClockwise,
    SpinCounterClockwise,
    BalanceDown,
}

impl Skill {
    pub const ALL: [Skill; 4] = [Skill::Swingup, Skill::SpinClockwise, Skill::SpinCounterClockwise, Skill::BalanceDown];

    pub fn name(self) -> &'static str {
        match self {
            Skill::Swingup => "swingup",
            Skill::SpinClockwise => "spin-cw",
            Skill::SpinCounterClockwise => "spin-ccw",
            Skill::BalanceDown => "balance-down",
        }
    }

    /// Per-step reward in `[0, 1]` (spins in `[-1, 1]`).
    pub fn reward(self, theta: f64, omega: f64) -> f64 {
        match self {
            Skill::Swingup => 0.5 * (1.0 + theta.cos()),
            Skill::BalanceDown => 0.5 * (1.0 - theta.cos()),
            Skill::SpinClockwise => (-omega / 4.0).clamp(-1.0, 1.0),
            Skill::SpinCounterClockwise => (omega / 4.0).clamp(-1.0, 1.0),
        }
    }
}

/// Physical state `(θ, ω)` with `θ = 0` upright; episodes start hanging down.
pub(super) fn initial_state(rng: &mut impl Rng) -> Vec<f64> {
    vec![PI + rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1)]
}

pub(super) fn observe(physical: &[f64]) -> Vec<f64> {
    vec![physical[0].cos(), physical[0].sin(), physical[1]]
}

pub(super) fn step(physical: &[f64], action: &[f64], task: &TaskDescriptor) -> (Vec<f64>, f64) {
    let mass = task.scalar(HiddenParam::MassScale).unwrap_or(1.0);
    let perturb = task.scalar(HiddenParam::JointPerturbation).unwrap_or(0.0);
    let friction = task.scalar(HiddenParam::Friction).unwrap_or(NOMINAL_FRICTION);
    let skill = task.choice(HiddenParam::Skill).map_or(Skill::Swingup, |i| Skill::ALL[i]);

    let (theta, omega) = (physical[0], physical[1]);
    let torque = PENDULUM_MAX_TORQUE * action[0] + perturb - FRICTION_GAIN * friction * omega;
    let accel = GRAVITY / LENGTH * theta.sin() + torque / mass;
    let omega = (omega + DT * accel).clamp(-MAX_SPEED, MAX_SPEED);
    let theta = wrap(theta + DT * omega);
    (vec![theta, omega], skill.reward(theta, omega))
}

fn wrap(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}
