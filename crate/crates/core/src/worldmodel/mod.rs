//! Task-conditioned recurrent state-space model.
//!
//! The latent task `l` enters the recurrent input, both state networks and
//! both decoders. With a zero-width task the same code builds a plain RSSM.

pub mod linear_gaussian;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{DiffError, NoiseSource, Var};
use crate::nn::{positive, Graph, GruCell, Linear, Mlp, ParamGroup, ParamStore};
use crate::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RssmDims {
    pub obs: usize,
    pub action: usize,
    /// Width of the conditioning vector; 0 disables conditioning.
    pub task: usize,
    pub deter: usize,
    pub stoch: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl RssmDims {
    pub fn feature(&self) -> usize {
        self.deter + self.stoch
    }
}

/// Floor added to predicted state standard deviations.
pub const MIN_STD: f64 = 0.1;

/// One filtered step: shared recurrent state, prior and posterior
/// parameters, and the stochastic sample.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub h: Var,
    pub s: Var,
    pub prior_mean: Var,
    pub prior_std: Var,
    pub post_mean: Var,
    pub post_std: Var,
}

/// A prior-only step as used during imagination.
#[derive(Clone, Copy, Debug)]
pub struct PriorVars {
    pub h: Var,
    pub s: Var,
    pub mean: Var,
    pub std: Var,
}

/// Plain recurrent state carried between environment steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RssmState {
    pub h: Tensor,
    pub s: Tensor,
}

impl RssmState {
    pub fn zeros(dims: &RssmDims, batch: usize) -> Self {
        Self { h: Tensor::zeros(&[batch, dims.deter]), s: Tensor::zeros(&[batch, dims.stoch]) }
    }

    /// `concat(h, s)` for the first row.
    pub fn feature(&self) -> Vec<f64> {
        let mut f = self.h.row(0).to_vec();
        f.extend_from_slice(self.s.row(0));
        f
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    pub recon_obs: Var,
    pub recon_reward: Var,
    pub kl: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub recon_obs: f64,
    pub recon_reward: f64,
    pub kl_reg: f64,
    pub total: f64,
}

impl ElboVars {
    pub fn values(&self, g: &Tape) -> ElboTerms {
        ElboTerms {
            recon_obs: g.value(self.recon_obs).item(),
            recon_reward: g.value(self.recon_reward).item(),
            kl_reg: g.value(self.kl).item(),
            total: g.value(self.total).item(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub reward_scale: f64,
    pub kl_scale: f64,
    /// Share of the KL gradient that trains the prior; `None` lets the
    /// plain KL gradient reach both sides.
    pub kl_balance: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { reward_scale: 1.0, kl_scale: 1.0, kl_balance: Some(0.8) }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldModel {
    pub dims: RssmDims,
    gru: GruCell,
    prior_hidden: Linear,
    prior_mean: Linear,
    prior_std: Linear,
    encoder: Mlp,
    post_hidden: Linear,
    post_mean: Linear,
    post_std: Linear,
    obs_decoder: Mlp,
    reward_decoder: Mlp,
}

fn with_task(g: &mut Graph, mut parts: Vec<Var>, l: Option<Var>) -> Result<Var, DiffError> {
    if let Some(l) = l {
        parts.push(l);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat(&parts)
    }
}

impl WorldModel {
    pub fn new(store: &mut ParamStore, dims: RssmDims, rng: &mut impl Rng) -> Self {
        let w = ParamGroup::World;
        let d = dims;
        Self {
            dims,
            gru: GruCell::new(store, "wm.gru", w, d.stoch + d.action + d.task, d.deter, rng),
            prior_hidden: Linear::new(store, "wm.prior.h", w, d.deter + d.task, d.hidden, rng),
            prior_mean: Linear::new(store, "wm.prior.mean", w, d.hidden, d.stoch, rng),
            prior_std: Linear::new(store, "wm.prior.std", w, d.hidden, d.stoch, rng),
            encoder: Mlp::new(store, "wm.encoder", w, d.obs, d.hidden, 1, d.embed, rng),
            post_hidden: Linear::new(store, "wm.post.h", w, d.deter + d.embed + d.task, d.hidden, rng),
            post_mean: Linear::new(store, "wm.post.mean", w, d.hidden, d.stoch, rng),
            post_std: Linear::new(store, "wm.post.std", w, d.hidden, d.stoch, rng),
            obs_decoder: Mlp::new(store, "wm.obs_dec", w, d.deter + d.stoch + d.task, d.hidden, 2, d.obs, rng),
            reward_decoder: Mlp::new(store, "wm.rew_dec", w, d.deter + d.stoch + d.task, d.hidden, 2, 1, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.gru.param_count()
            + [&self.prior_hidden, &self.prior_mean, &self.prior_std, &self.post_hidden, &self.post_mean, &self.post_std]
                .iter()
                .map(|l| l.param_count())
                .sum::<usize>()
            + self.encoder.param_count()
            + self.obs_decoder.param_count()
            + self.reward_decoder.param_count()
    }

    fn task(&self, l: Option<Var>) -> Result<Option<Var>, DiffError> {
        match (self.dims.task, l) {
            (0, _) => Ok(None),
            (_, Some(l)) => Ok(Some(l)),
            (_, None) => Err(DiffError::Usage("conditioned model needs a task vector")),
        }
    }

    fn gaussian_head(
        g: &mut Graph,
        hidden: &Linear,
        mean: &Linear,
        std: &Linear,
        input: Var,
    ) -> Result<(Var, Var), DiffError> {
        let z = hidden.forward(g, input)?;
        let z = g.elu(z)?;
        let m = mean.forward(g, z)?;
        let s = std.forward(g, z)?;
        Ok((m, positive(g, s, MIN_STD)?))
    }

    fn sample(g: &mut Graph, mean: Var, std: Var, noise: Option<&mut NoiseSource>) -> Result<Var, DiffError> {
        match noise {
            Some(n) => crate::diffmath::reparam_sample(&mut **g, mean, std, n),
            None => Ok(mean),
        }
    }

    /// `h_t = GRU(h_{t−1}, [s_{t−1}, a_{t−1}, l])`.
    pub fn recurrent(&self, g: &mut Graph, h: Var, s: Var, a: Var, l: Option<Var>) -> Result<Var, DiffError> {
        let l = self.task(l)?;
        let x = with_task(g, vec![s, a], l)?;
        self.gru.forward(g, h, x)
    }

    /// Prior parameters of `s_t` given `h_t`.
    pub fn prior(&self, g: &mut Graph, h: Var, l: Option<Var>) -> Result<(Var, Var), DiffError> {
        let l = self.task(l)?;
        let x = with_task(g, vec![h], l)?;
        Self::gaussian_head(g, &self.prior_hidden, &self.prior_mean, &self.prior_std, x)
    }

    pub fn embed(&self, g: &mut Graph, obs: Var) -> Result<Var, DiffError> {
        let e = self.encoder.forward(g, obs)?;
        g.elu(e)
    }

    /// Posterior parameters of `s_t` given `h_t` and the embedded observation.
    pub fn posterior(&self, g: &mut Graph, h: Var, embed: Var, l: Option<Var>) -> Result<(Var, Var), DiffError> {
        let l = self.task(l)?;
        let x = with_task(g, vec![h, embed], l)?;
        Self::gaussian_head(g, &self.post_hidden, &self.post_mean, &self.post_std, x)
    }

    /// One imagination step; `noise = None` returns the prior mean.
    pub fn prior_step(
        &self,
        g: &mut Graph,
        h: Var,
        s: Var,
        a: Var,
        l: Option<Var>,
        noise: Option<&mut NoiseSource>,
    ) -> Result<PriorVars, DiffError> {
        let h = self.recurrent(g, h, s, a, l)?;
        let (mean, std) = self.prior(g, h, l)?;
        let s = Self::sample(g, mean, std, noise)?;
        Ok(PriorVars { h, s, mean, std })
    }

    /// One filtering step; prior and posterior share `h_t`.
    #[allow(clippy::too_many_arguments)]
    pub fn posterior_step(
        &self,
        g: &mut Graph,
        h: Var,
        s: Var,
        a: Var,
        obs: Var,
        l: Option<Var>,
        noise: Option<&mut NoiseSource>,
    ) -> Result<StepVars, DiffError> {
        let h = self.recurrent(g, h, s, a, l)?;
        let (prior_mean, prior_std) = self.prior(g, h, l)?;
        let e = self.embed(g, obs)?;
        let (post_mean, post_std) = self.posterior(g, h, e, l)?;
        let s = Self::sample(g, post_mean, post_std, noise)?;
        Ok(StepVars { h, s, prior_mean, prior_std, post_mean, post_std })
    }

    /// Filters `obs[t]` given `prev_actions[t]` (the action that led to it)
    /// from the zero state. All inputs are `[B, ·]`.
    pub fn observe_sequence(
        &self,
        g: &mut Graph,
        obs: &[Var],
        prev_actions: &[Var],
        l: Option<Var>,
        mut noise: Option<&mut NoiseSource>,
    ) -> Result<Vec<StepVars>, DiffError> {
        if obs.is_empty() || obs.len() != prev_actions.len() {
            return Err(DiffError::Usage("observation and action sequences must be non-empty and equally long"));
        }
        let batch = g.value(obs[0]).rows();
        let mut h = g.constant(Tensor::zeros(&[batch, self.dims.deter]))?;
        let mut s = g.constant(Tensor::zeros(&[batch, self.dims.stoch]))?;
        let mut out = Vec::with_capacity(obs.len());
        for (&o, &a) in obs.iter().zip(prev_actions) {
            let step = self.posterior_step(g, h, s, a, o, l, noise.as_deref_mut())?;
            h = step.h;
            s = step.s;
            out.push(step);
        }
        Ok(out)
    }

    pub fn feature(&self, g: &mut Graph, h: Var, s: Var) -> Result<Var, DiffError> {
        g.concat(&[h, s])
    }

    /// Decoder means `(ô, r̂)`; `r̂` is `[B, 1]`.
    pub fn decode(&self, g: &mut Graph, h: Var, s: Var, l: Option<Var>) -> Result<(Var, Var), DiffError> {
        let l = self.task(l)?;
        let x = with_task(g, vec![h, s], l)?;
        Ok((self.obs_decoder.forward(g, x)?, self.reward_decoder.forward(g, x)?))
    }

    pub fn reward(&self, g: &mut Graph, h: Var, s: Var, l: Option<Var>) -> Result<Var, DiffError> {
        let l = self.task(l)?;
        let x = with_task(g, vec![h, s], l)?;
        self.reward_decoder.forward(g, x)
    }

    /// Negative bound averaged over steps and batch. `rewards[t]` is the
    /// target for `steps[t + 1]`; the first state has no reward target.
    pub fn elbo_loss(
        &self,
        g: &mut Graph,
        steps: &[StepVars],
        obs: &[Var],
        rewards: &[Var],
        l: Option<Var>,
        weights: &LossWeights,
    ) -> Result<ElboVars, DiffError> {
        if steps.len() != obs.len() || rewards.len() + 1 != steps.len() {
            return Err(DiffError::Usage("elbo inputs must align with the filtered steps"));
        }
        let batch = g.value(obs[0]).rows();
        let unit_obs = g.constant(Tensor::ones(&[batch, self.dims.obs]))?;
        let unit_rew = g.constant(Tensor::ones(&[batch, 1]))?;

        let mut obs_terms = Vec::with_capacity(steps.len());
        let mut rew_terms = Vec::with_capacity(rewards.len());
        let mut kl_terms = Vec::with_capacity(steps.len());
        for (t, st) in steps.iter().enumerate() {
            let (o_hat, r_hat) = self.decode(g, st.h, st.s, l)?;
            let lp = g.gaussian_log_prob(obs[t], o_hat, unit_obs)?;
            obs_terms.push(g.mean(lp)?);
            if t > 0 {
                let lp = g.gaussian_log_prob(rewards[t - 1], r_hat, unit_rew)?;
                rew_terms.push(g.mean(lp)?);
            }
            let kl = match weights.kl_balance {
                Some(alpha) => {
                    let pm = g.detach(st.post_mean)?;
                    let ps = g.detach(st.post_std)?;
                    let qm = g.detach(st.prior_mean)?;
                    let qs = g.detach(st.prior_std)?;
                    let trains_prior = g.gaussian_kl_diag(pm, ps, st.prior_mean, st.prior_std)?;
                    let trains_post = g.gaussian_kl_diag(st.post_mean, st.post_std, qm, qs)?;
                    let a = g.scale(trains_prior, alpha)?;
                    let b = g.scale(trains_post, 1.0 - alpha)?;
                    g.add(a, b)?
                }
                None => g.gaussian_kl_diag(st.post_mean, st.post_std, st.prior_mean, st.prior_std)?,
            };
            kl_terms.push(g.mean(kl)?);
        }
        let recon_obs = average(g, &obs_terms)?;
        let recon_reward = average(g, &rew_terms)?;
        let kl = average(g, &kl_terms)?;

        let rs = g.scale(recon_reward, weights.reward_scale)?;
        let recon = g.add(recon_obs, rs)?;
        let neg = g.scale(recon, -1.0)?;
        let ks = g.scale(kl, weights.kl_scale)?;
        let total = g.add(neg, ks)?;
        Ok(ElboVars { recon_obs, recon_reward, kl, total })
    }

    /// Posterior-mean filtering step outside any training graph; used when
    /// acting in the environment.
    pub fn filter(
        &self,
        store: &ParamStore,
        state: &RssmState,
        action: &[f64],
        obs: &[f64],
        l: Option<&[f64]>,
    ) -> Result<RssmState, DiffError> {
        let mut g = Graph::inference(store);
        let h = g.constant(state.h.clone())?;
        let s = g.constant(state.s.clone())?;
        let a = g.constant(Tensor::matrix(1, action.len(), action.to_vec())?)?;
        let o = g.constant(Tensor::matrix(1, obs.len(), obs.to_vec())?)?;
        let l = match l {
            Some(v) if self.dims.task > 0 => Some(g.constant(Tensor::matrix(1, v.len(), v.to_vec())?)?),
            _ => None,
        };
        let step = self.posterior_step(&mut g, h, s, a, o, l, None)?;
        Ok(RssmState { h: g.value(step.h).clone(), s: g.value(step.s).clone() })
    }
}

/// Mean of scalar variables; zero for an empty list.
fn average(g: &mut Graph, terms: &[Var]) -> Result<Var, DiffError> {
    let Some((&first, rest)) = terms.split_first() else {
        return g.constant(Tensor::scalar(0.0));
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

#[cfg(test)]
mod tests;
