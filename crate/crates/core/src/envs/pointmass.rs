use rand::Rng;

use super::{HiddenParam, TaskDescriptor, DT};

pub const POINTMASS_MAX_FORCE: f64 = 20.0;
const MASS: f64 = 1.0;
const ACTION_COST: f64 = 0.01;
/// Speed limit per axis.
pub const POINTMASS_MAX_SPEED: f64 = 10.0;

/// Physical state layout: positions then velocities.
pub(super) fn initial_state(dims: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut s = vec![0.0; 2 * dims];
    for v in &mut s[dims..] {
        *v = rng.random_range(-0.1..=0.1);
    }
    s
}

pub(super) fn observe(physical: &[f64], dims: usize) -> Vec<f64> {
    physical[dims..2 * dims].to_vec()
}

pub(super) fn step(physical: &[f64], action: &[f64], task: &TaskDescriptor, dims: usize) -> (Vec<f64>, f64) {
    let target = task.scalar(HiddenParam::TargetVelocity).unwrap_or(0.0);
    let wind = task.vector(HiddenParam::WindForce);
    let perturb = task.vector(HiddenParam::ActionPerturbation);
    let disabled = task.choice(HiddenParam::ActuatorDeactivation);

    let mut next = physical.to_vec();
    let mut reward = 0.0;
    for i in 0..dims {
        let mut force = POINTMASS_MAX_FORCE * action[i];
        if disabled == Some(i) {
            force = 0.0;
        }
        force += perturb.map_or(0.0, |p| p[i]);
        force += wind.map_or(0.0, |w| w[i]);
        let v = (physical[dims + i] + DT * force / MASS).clamp(-POINTMASS_MAX_SPEED, POINTMASS_MAX_SPEED);
        next[dims + i] = v;
        next[i] = physical[i] + DT * v;
        let goal = if i == 0 { target } else { 0.0 };
        reward -= (v - goal).abs();
        reward -= ACTION_COST * action[i] * action[i];
    }
    (next, reward)
}
