//! Actor-critic learning inside the world model's imagination.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{DiffError, NoiseSource, Scalar, Var};
use crate::nn::{positive, Graph, Linear, Mlp, ParamGroup, ParamStore};
use crate::worldmodel::WorldModel;
use crate::{Tape, Tensor};

/// Floor on the actor's pre-squash standard deviation.
pub const ACTOR_MIN_STD: f64 = 0.01;

fn input(g: &mut Graph, h: Var, s: Var, l: Option<Var>) -> Result<Var, DiffError> {
    match l {
        Some(l) => g.concat(&[h, s, l]),
        None => g.concat(&[h, s]),
    }
}

/// Tanh-squashed diagonal Gaussian policy over `[-1, 1]^A`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Actor {
    trunk: Mlp,
    mean: Linear,
    std: Linear,
}

impl Actor {
    /// `layers ≥ 1` ELU hidden layers, then mean and scale heads.
    pub fn new(store: &mut ParamStore, input_dim: usize, hidden: usize, layers: usize, action: usize, rng: &mut impl Rng) -> Self {
        let a = ParamGroup::Actor;
        Self {
            trunk: Mlp::new(store, "actor", a, input_dim, hidden, layers.max(1) - 1, hidden, rng),
            mean: Linear::new(store, "actor.mean", a, hidden, action, rng),
            std: Linear::new(store, "actor.std", a, hidden, action, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.mean.param_count() + self.std.param_count()
    }

    /// Pre-squash mean and standard deviation.
    pub fn distribution(&self, g: &mut Graph, h: Var, s: Var, l: Option<Var>) -> Result<(Var, Var), DiffError> {
        let x = input(g, h, s, l)?;
        let z = self.trunk.forward(g, x)?;
        let z = g.elu(z)?;
        let mean = self.mean.forward(g, z)?;
        let raw = self.std.forward(g, z)?;
        Ok((mean, positive(g, raw, ACTOR_MIN_STD)?))
    }

    /// `tanh(μ + σ ε)`; without noise, the mode `tanh(μ)`.
    pub fn action(&self, g: &mut Graph, h: Var, s: Var, l: Option<Var>, noise: Option<&mut NoiseSource>) -> Result<Var, DiffError> {
        let (mean, std) = self.distribution(g, h, s, l)?;
        let pre = match noise {
            Some(n) => crate::diffmath::reparam_sample(&mut **g, mean, std, n)?,
            None => mean,
        };
        g.tanh(pre)
    }

    /// Single action for one feature row, outside any training graph.
    pub fn act(&self, store: &ParamStore, h: &Tensor, s: &Tensor, l: Option<&[f64]>, noise: Option<&mut NoiseSource>) -> Result<Vec<f64>, DiffError> {
        let mut g = Graph::inference(store);
        let hv = g.constant(h.clone())?;
        let sv = g.constant(s.clone())?;
        let lv = match l {
            Some(v) if !v.is_empty() => Some(g.constant(Tensor::matrix(1, v.len(), v.to_vec())?)?),
            _ => None,
        };
        let a = self.action(&mut g, hv, sv, lv, noise)?;
        Ok(g.value(a).row(0).to_vec())
    }
}

/// State-value network with a lagged target copy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Critic {
    online: Mlp,
    target: Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TargetUpdate {
    Soft { tau: f64 },
    Hard { every: u64 },
}

impl Default for TargetUpdate {
    fn default() -> Self {
        TargetUpdate::Soft { tau: 0.05 }
    }
}

impl Critic {
    pub fn new(store: &mut ParamStore, input_dim: usize, hidden: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let online = Mlp::new(store, "critic", ParamGroup::Critic, input_dim, hidden, layers, 1, rng);
        let target = Mlp::new(store, "critic.target", ParamGroup::Target, input_dim, hidden, layers, 1, rng);
        let critic = Self { online, target };
        critic.copy_weights(store, 1.0);
        critic
    }

    pub fn param_count(&self) -> usize {
        self.online.param_count()
    }

    pub fn value(&self, g: &mut Graph, h: Var, s: Var, l: Option<Var>) -> Result<Var, DiffError> {
        let x = input(g, h, s, l)?;
        self.online.forward(g, x)
    }

    pub fn target_value(&self, g: &mut Graph, h: Var, s: Var, l: Option<Var>) -> Result<Var, DiffError> {
        let x = input(g, h, s, l)?;
        self.target.forward(g, x)
    }

    fn pairs(&self) -> Vec<(crate::nn::ParamId, crate::nn::ParamId)> {
        let mut out = Vec::new();
        for (o, t) in self.online.hidden.iter().chain([&self.online.out]).zip(self.target.hidden.iter().chain([&self.target.out])) {
            out.push((o.w, t.w));
            out.push((o.b, t.b));
        }
        out
    }

    /// `target ← τ·online + (1−τ)·target`.
    pub fn copy_weights(&self, store: &mut ParamStore, tau: f64) {
        for (o, t) in self.pairs() {
            let src = store.get(o).clone();
            for (tv, &ov) in store.get_mut(t).values_mut().iter_mut().zip(src.values()) {
                *tv = tau * ov + (1.0 - tau) * *tv;
            }
        }
    }

    /// Applies the configured rule after behaviour update number `step`
    /// (counted from 1).
    pub fn update_target(&self, store: &mut ParamStore, mode: TargetUpdate, step: u64) {
        match mode {
            TargetUpdate::Soft { tau } => self.copy_weights(store, tau),
            TargetUpdate::Hard { every } => {
                if every > 0 && step.is_multiple_of(every) {
                    self.copy_weights(store, 1.0);
                }
            }
        }
    }
}

/// Rollout under the prior from a batch of start states.
#[derive(Clone, Debug)]
pub struct Imagined {
    /// `H + 1` recurrent states, the first being the start state.
    pub h: Vec<Var>,
    pub s: Vec<Var>,
    /// `H` actions; `actions[τ]` is taken in state `τ`.
    pub actions: Vec<Var>,
    /// `H` predicted rewards; `rewards[τ]` is decoded from state `τ + 1`.
    pub rewards: Vec<Var>,
    pub l: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
pub fn imagine(
    g: &mut Graph,
    world: &WorldModel,
    actor: &Actor,
    start_h: Var,
    start_s: Var,
    l: Option<Var>,
    horizon: usize,
    noise: &mut NoiseSource,
) -> Result<Imagined, DiffError> {
    if horizon < 1 {
        return Err(DiffError::Usage("imagination horizon must be at least 1"));
    }
    let mut out = Imagined { h: vec![start_h], s: vec![start_s], actions: Vec::new(), rewards: Vec::new(), l };
    let (mut h, mut s) = (start_h, start_s);
    for _ in 0..horizon {
        let a = actor.action(g, h, s, l, Some(noise))?;
        let next = world.prior_step(g, h, s, a, l, Some(noise))?;
        let r = world.reward(g, next.h, next.s, l)?;
        h = next.h;
        s = next.s;
        out.actions.push(a);
        out.rewards.push(r);
        out.h.push(h);
        out.s.push(s);
    }
    Ok(out)
}

/// `V(τ) = r_τ + γ[(1−λ) v_{τ+1} + λ V(τ+1)]` with `V(H) = v_H`; returns
/// `V(0..H)`.
pub fn lambda_return<T: Scalar>(rewards: &[T], values: &[T], gamma: T, lambda: T) -> Result<Vec<T>, DiffError> {
    if values.len() != rewards.len() + 1 {
        return Err(DiffError::Length { shape: vec![rewards.len() + 1], len: values.len() });
    }
    let mut out = vec![T::zero(); rewards.len()];
    let mut next = values[rewards.len()];
    for t in (0..rewards.len()).rev() {
        next = rewards[t] + gamma * ((T::one() - lambda) * values[t + 1] + lambda * next);
        out[t] = next;
    }
    Ok(out)
}

/// Tape version of [`lambda_return`] over `[B, 1]` columns.
pub fn lambda_return_on_tape(g: &mut Tape, rewards: &[Var], values: &[Var], gamma: f64, lambda: f64) -> Result<Vec<Var>, DiffError> {
    if values.len() != rewards.len() + 1 {
        return Err(DiffError::Length { shape: vec![rewards.len() + 1], len: values.len() });
    }
    let mut out = vec![values[0]; rewards.len()];
    let mut next = values[rewards.len()];
    for t in (0..rewards.len()).rev() {
        let boot = g.scale(values[t + 1], gamma * (1.0 - lambda))?;
        let rec = g.scale(next, gamma * lambda)?;
        let tail = g.add(boot, rec)?;
        next = g.add(rewards[t], tail)?;
        out[t] = next;
    }
    Ok(out)
}

/// `−mean_τ mean_b V_λ(τ)`.
pub fn actor_loss(g: &mut Tape, returns: &[Var]) -> Result<Var, DiffError> {
    let mut acc: Option<Var> = None;
    for &r in returns {
        let m = g.mean(r)?;
        acc = Some(match acc {
            Some(a) => g.add(a, m)?,
            None => m,
        });
    }
    let total = acc.ok_or(DiffError::Usage("empty return sequence"))?;
    g.scale(total, -1.0 / returns.len() as f64)
}

/// `mean_τ mean_b ½ (v_τ − V_λ(τ))²` with the returns treated as constants.
pub fn critic_loss(g: &mut Tape, values: &[Var], returns: &[Var]) -> Result<Var, DiffError> {
    if values.len() != returns.len() || values.is_empty() {
        return Err(DiffError::Usage("critic values and returns must align"));
    }
    let mut acc: Option<Var> = None;
    for (&v, &r) in values.iter().zip(returns) {
        let r = g.detach(r)?;
        let d = g.sub(v, r)?;
        let sq = g.square(d)?;
        let m = g.mean(sq)?;
        acc = Some(match acc {
            Some(a) => g.add(a, m)?,
            None => m,
        });
    }
    g.scale(acc.expect("non-empty"), 0.5 / values.len() as f64)
}

#[cfg(test)]
mod tests;
