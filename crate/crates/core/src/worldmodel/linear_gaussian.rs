//! Scalar linear-Gaussian hidden-parameter system with a linear variational
//! filter, for checking the sequence bound against an exact likelihood.
//!
//! Generative model, with `s_0 = 0` and `l ~ N(μ_c, v_c)` held fixed:
//! `s_t = ρ s_{t−1} + κ l + η a_{t−1} + w_t`, `w_t ~ N(0, q)`, and
//! `o_t = s_t + v_t`, `v_t ~ N(0, 1)`.
//!
//! Variational family: `q(s_t | s_{t−1}, o_t, l) = N(α s_{t−1} + β o_t + γ l + δ a_{t−1}, σ²)`.
//! The bound is evaluated in closed form by propagating the joint moments of
//! `(s_t, l)` under `q`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmath::{DiffError, Var};
use crate::nn::{positive, Adam, Graph, ParamGroup, ParamId, ParamStore};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianSystem {
    pub rho: f64,
    pub kappa: f64,
    pub eta: f64,
    pub q: f64,
    pub mu_c: f64,
    pub v_c: f64,
}

impl LinearGaussianSystem {
    /// Draws `l`, then `o_1..o_T` for the given actions `a_0..a_{T−1}`.
    pub fn simulate(&self, actions: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let mut n = || rng.sample::<f64, _>(StandardNormal);
        let l = self.mu_c + self.v_c.sqrt() * n();
        let mut s = 0.0;
        actions
            .iter()
            .map(|&a| {
                s = self.rho * s + self.kappa * l + self.eta * a + self.q.sqrt() * n();
                s + n()
            })
            .collect()
    }
}

/// Trainable variational filter.
#[derive(Clone, Debug)]
pub struct LinearFilter {
    pub store: ParamStore,
    alpha: ParamId,
    beta: ParamId,
    gamma: ParamId,
    delta: ParamId,
    sigma: ParamId,
}

fn scalar(v: f64) -> Tensor {
    Tensor::matrix(1, 1, vec![v]).expect("1x1")
}

impl Default for LinearFilter {
    fn default() -> Self {
        Self::new()
    }
}

impl LinearFilter {
    pub fn new() -> Self {
        let mut store = ParamStore::new();
        let w = ParamGroup::World;
        let alpha = store.add("alpha", w, scalar(0.0));
        let beta = store.add("beta", w, scalar(0.0));
        let gamma = store.add("gamma", w, scalar(0.0));
        let delta = store.add("delta", w, scalar(0.0));
        let sigma = store.add("sigma", w, scalar(0.5));
        Self { store, alpha, beta, gamma, delta, sigma }
    }

    /// Closed-form bound on `log p(o_{1:T} | a, context)`.
    pub fn elbo_on_tape(&self, g: &mut Graph, sys: &LinearGaussianSystem, obs: &[f64], actions: &[f64]) -> Result<Var, DiffError> {
        if obs.len() != actions.len() || obs.is_empty() {
            return Err(DiffError::Usage("observations and actions must align"));
        }
        let alpha = g.param(self.alpha)?;
        let beta = g.param(self.beta)?;
        let gamma = g.param(self.gamma)?;
        let delta = g.param(self.delta)?;
        let raw = g.param(self.sigma)?;
        let sigma = positive(g, raw, 1e-3)?;
        let var_q = g.square(sigma)?;

        let c = |g: &mut Graph, v: f64| g.constant(scalar(v));
        let rho = c(g, sys.rho)?;
        let kappa = c(g, sys.kappa)?;
        let eta = c(g, sys.eta)?;
        let mu_c = c(g, sys.mu_c)?;
        let v_c = c(g, sys.v_c)?;
        let zero = c(g, 0.0)?;
        let one = c(g, 1.0)?;
        let prior_std = c(g, sys.q.sqrt())?;

        let da = g.sub(alpha, rho)?;
        let dg = g.sub(gamma, kappa)?;
        let dd = g.sub(delta, eta)?;
        let da2 = g.square(da)?;
        let dg2 = g.square(dg)?;
        let dadg = g.mul(da, dg)?;
        let a2 = g.square(alpha)?;
        let g2 = g.square(gamma)?;
        let ag = g.mul(alpha, gamma)?;
        let gvc = g.mul(gamma, v_c)?;
        let g2vc = g.mul(g2, v_c)?;
        let dg2vc = g.mul(dg2, v_c)?;

        let (mut ms, mut pss, mut psl) = (zero, zero, zero);
        let mut total = zero;
        for (&o, &a) in obs.iter().zip(actions) {
            let o = c(g, o)?;
            let a = c(g, a)?;
            // residual mean between q and p
            let t1 = g.mul(da, ms)?;
            let t2 = g.mul(beta, o)?;
            let t3 = g.mul(dg, mu_c)?;
            let t4 = g.mul(dd, a)?;
            let md = g.add(t1, t2)?;
            let md = g.add(md, t3)?;
            let md = g.add(md, t4)?;
            let v1 = g.mul(da2, pss)?;
            let v2 = g.mul(dadg, psl)?;
            let v2 = g.scale(v2, 2.0)?;
            let vd = g.add(v1, v2)?;
            let vd = g.add(vd, dg2vc)?;
            let kl = g.gaussian_kl_diag(md, sigma, zero, prior_std)?;
            let extra = g.scale(vd, 0.5 / sys.q)?;

            // moments of s_t
            let u1 = g.mul(alpha, ms)?;
            let u3 = g.mul(gamma, mu_c)?;
            let u4 = g.mul(delta, a)?;
            let next_ms = g.add(u1, t2)?;
            let next_ms = g.add(next_ms, u3)?;
            let next_ms = g.add(next_ms, u4)?;
            let p1 = g.mul(a2, pss)?;
            let p2 = g.mul(ag, psl)?;
            let p2 = g.scale(p2, 2.0)?;
            let next_pss = g.add(p1, p2)?;
            let next_pss = g.add(next_pss, g2vc)?;
            let next_pss = g.add(next_pss, var_q)?;
            let q1 = g.mul(alpha, psl)?;
            psl = g.add(q1, gvc)?;
            ms = next_ms;
            pss = next_pss;

            let lp = g.gaussian_log_prob(o, ms, one)?;
            let spread = g.scale(pss, 0.5)?;
            let recon = g.sub(lp, spread)?;
            let step = g.sub(recon, kl)?;
            let step = g.sub(step, extra)?;
            total = g.add(total, step)?;
        }
        g.sum(total)
    }

    pub fn elbo(&self, sys: &LinearGaussianSystem, obs: &[f64], actions: &[f64]) -> Result<f64, DiffError> {
        let mut g = Graph::inference(&self.store);
        let e = self.elbo_on_tape(&mut g, sys, obs, actions)?;
        Ok(g.value(e).item())
    }

    /// Monte-Carlo estimate of the same bound by sampling `l` and the
    /// trajectory from the variational filter.
    pub fn elbo_monte_carlo(
        &self,
        sys: &LinearGaussianSystem,
        obs: &[f64],
        actions: &[f64],
        samples: usize,
        rng: &mut impl Rng,
    ) -> f64 {
        let p = |id| self.store.get(id).item();
        let (alpha, beta, gamma, delta) = (p(self.alpha), p(self.beta), p(self.gamma), p(self.delta));
        let raw = p(self.sigma);
        let sigma = raw.max(0.0) + (-raw.abs()).exp().ln_1p() + 1e-3;
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut acc = 0.0;
        for _ in 0..samples {
            let l = sys.mu_c + sys.v_c.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let mut s = 0.0;
            for (&o, &a) in obs.iter().zip(actions) {
                let mq = alpha * s + beta * o + gamma * l + delta * a;
                let mp = sys.rho * s + sys.kappa * l + sys.eta * a;
                s = mq + sigma * rng.sample::<f64, _>(StandardNormal);
                let kl = (sys.q.sqrt() / sigma).ln() + (sigma * sigma + (mq - mp).powi(2)) / (2.0 * sys.q) - 0.5;
                acc += -half_ln_2pi - 0.5 * (o - s).powi(2) - kl;
            }
        }
        acc / samples as f64
    }

    /// Gradient ascent on the bound; returns the bound before every step
    /// and after the last one.
    pub fn fit(&mut self, sys: &LinearGaussianSystem, obs: &[f64], actions: &[f64], steps: usize, lr: f64) -> Result<Vec<f64>, DiffError> {
        let ids = self.store.ids().collect();
        let mut opt = Adam::new(&self.store, ids, lr, None);
        let mut history = Vec::with_capacity(steps + 1);
        for _ in 0..steps {
            let mut g = Graph::new(&self.store, &[ParamGroup::World]);
            let e = self.elbo_on_tape(&mut g, sys, obs, actions)?;
            history.push(g.value(e).item());
            let loss = g.scale(e, -1.0)?;
            let grads = g.backward(loss)?;
            opt.step(&mut self.store, &grads);
        }
        history.push(self.elbo(sys, obs, actions)?);
        Ok(history)
    }
}
