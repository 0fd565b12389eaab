use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{AgentVariant, Config};
use super::replay::TrainingBatch;
use crate::behavior::{actor_loss, critic_loss, imagine, lambda_return_on_tape, Actor, Critic};
use crate::context::ContextSnapshot;
use crate::diffmath::{DiffError, NoiseSource, Var};
use crate::nn::{Adam, Graph, ParamGroup, ParamStore};
use crate::taskinfer::{sample_task, SetEncoder, TaskBelief, TaskPrior};
use crate::worldmodel::{ElboTerms, LossWeights, RssmDims, RssmState, WorldModel};
use crate::Tensor;

/// Networks, optimizers and the conditioning wiring of one agent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Agent {
    pub variant: AgentVariant,
    pub store: ParamStore,
    pub world: WorldModel,
    pub encoder: Option<SetEncoder>,
    pub actor: Actor,
    pub critic: Critic,
    pub prior: TaskPrior<f64>,
    model_opt: Adam,
    actor_opt: Adam,
    critic_opt: Adam,
    behavior_steps: u64,
}

/// Posterior states from a dynamics update, flattened step-major
/// (`row = t·B + b`), with the matching task vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct StartStates {
    pub h: Tensor,
    pub s: Tensor,
    pub l: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorLosses {
    pub actor: f64,
    pub critic: f64,
}

impl Agent {
    pub fn new(cfg: &Config, obs_dim: usize, act_dim: usize, oracle_dim: usize, rng: &mut impl Rng) -> Self {
        let variant = cfg.run.agent_variant;
        let m = &cfg.model;
        let task = match variant {
            AgentVariant::Vanilla => 0,
            AgentVariant::Taskinfer => m.latent_dim,
            AgentVariant::Oracle => oracle_dim,
        };
        let dims = RssmDims { obs: obs_dim, action: act_dim, task, deter: m.deter, stoch: m.stoch, hidden: m.hidden, embed: m.embed };
        let mut store = ParamStore::new();
        let world = WorldModel::new(&mut store, dims, rng);
        let encoder = (variant == AgentVariant::Taskinfer).then(|| {
            let width = crate::envs::Transition::flat_width(obs_dim, act_dim);
            SetEncoder::new(&mut store, width, m.encoder_units, m.latent_dim, rng)
        });
        let feat = dims.feature() + task;
        let actor = Actor::new(&mut store, feat, m.hidden, m.actor_layers, act_dim, rng);
        let critic = Critic::new(&mut store, feat, m.hidden, m.critic_layers, rng);
        let t = &cfg.train;
        let clip = Some(t.grad_clip);
        let mut model_params = store.ids_in(ParamGroup::World);
        model_params.extend(store.ids_in(ParamGroup::Encoder));
        let model_opt = Adam::new(&store, model_params, t.model_lr, clip);
        let actor_opt = Adam::new(&store, store.ids_in(ParamGroup::Actor), t.actor_lr, clip);
        let critic_opt = Adam::new(&store, store.ids_in(ParamGroup::Critic), t.critic_lr, clip);
        let prior = TaskPrior::standard(m.latent_dim);
        Self { variant, store, world, encoder, actor, critic, prior, model_opt, actor_opt, critic_opt, behavior_steps: 0 }
    }

    pub fn task_dim(&self) -> usize {
        self.world.dims.task
    }

    /// Belief from a context snapshot (task-inference variant only).
    pub fn belief(&self, snapshot: &ContextSnapshot) -> Result<Option<TaskBelief<f64>>, DiffError> {
        match &self.encoder {
            Some(enc) => Ok(Some(enc.belief(&self.store, &snapshot.rows, &snapshot.mask, &self.prior)?)),
            None => Ok(None),
        }
    }

    /// The conditioning vector used while acting: a belief draw (or its
    /// mean when `noise` is `None`), the oracle vector, or nothing.
    pub fn task_vector(
        &self,
        belief: Option<&TaskBelief<f64>>,
        oracle: &[f64],
        noise: Option<&mut NoiseSource>,
    ) -> Option<Vec<f64>> {
        match self.variant {
            AgentVariant::Vanilla => None,
            AgentVariant::Oracle => Some(oracle.to_vec()),
            AgentVariant::Taskinfer => {
                let b = belief.expect("task inference needs a belief");
                Some(match noise {
                    Some(n) => b.sample(n.rng()),
                    None => b.mu_l.clone(),
                })
            }
        }
    }

    pub fn filter(&self, state: &RssmState, prev_action: &[f64], obs: &[f64], l: Option<&[f64]>) -> Result<RssmState, DiffError> {
        self.world.filter(&self.store, state, prev_action, obs, l)
    }

    pub fn act(&self, state: &RssmState, l: Option<&[f64]>, noise: Option<&mut NoiseSource>) -> Result<Vec<f64>, DiffError> {
        self.actor.act(&self.store, &state.h, &state.s, l, noise)
    }

    /// One joint step on the world model and set encoder.
    pub fn dynamics_update(
        &mut self,
        batch: &TrainingBatch,
        cfg: &Config,
        noise: &mut NoiseSource,
    ) -> Result<(ElboTerms, StartStates), DiffError> {
        let b = batch.obs[0].rows();
        let weights = LossWeights {
            reward_scale: cfg.train.reward_scale,
            kl_scale: cfg.train.kl_scale,
            kl_balance: Some(cfg.train.kl_balance),
        };
        let mut g = Graph::new(&self.store, &[ParamGroup::World, ParamGroup::Encoder]);
        let l = match self.variant {
            AgentVariant::Vanilla => None,
            AgentVariant::Oracle => Some(g.constant(batch.oracle.clone())?),
            AgentVariant::Taskinfer => {
                let enc = self.encoder.as_ref().expect("encoder present");
                let belief = enc.infer(&mut g, &batch.context, &batch.context_weights, b, &self.prior)?;
                Some(sample_task(&mut g, belief, noise)?)
            }
        };
        let obs: Vec<Var> = batch.obs.iter().map(|t| g.constant(t.clone())).collect::<Result<_, _>>()?;
        let acts: Vec<Var> = batch.prev_actions.iter().map(|t| g.constant(t.clone())).collect::<Result<_, _>>()?;
        let rews: Vec<Var> = batch.rewards.iter().map(|t| g.constant(t.clone())).collect::<Result<_, _>>()?;
        let steps = self.world.observe_sequence(&mut g, &obs, &acts, l, Some(noise))?;
        let elbo = self.world.elbo_loss(&mut g, &steps, &obs, &rews, l, &weights)?;
        let terms = elbo.values(&g);

        let hs: Vec<&Tensor> = steps.iter().map(|st| g.value(st.h)).collect();
        let ss: Vec<&Tensor> = steps.iter().map(|st| g.value(st.s)).collect();
        let starts = StartStates {
            h: Tensor::vstack(&hs)?,
            s: Tensor::vstack(&ss)?,
            l: l.map(|v| g.value(v).repeat_rows(steps.len())),
        };
        let grads = g.backward(elbo.total)?;
        self.model_opt.step(&mut self.store, &grads);
        Ok((terms, starts))
    }

    /// Actor and critic steps on trajectories imagined from `starts`.
    pub fn behavior_update(
        &mut self,
        starts: &StartStates,
        cfg: &Config,
        rng: &mut impl Rng,
        noise: &mut NoiseSource,
    ) -> Result<BehaviorLosses, DiffError> {
        let t = &cfg.train;
        let total = starts.h.rows();
        let idx: Vec<usize> = if t.imagine_starts == 0 || t.imagine_starts >= total {
            (0..total).collect()
        } else {
            let mut v = sample_indices(rng, total, t.imagine_starts).into_vec();
            v.sort_unstable();
            v
        };
        let (h0, s0) = (starts.h.gather_rows(&idx), starts.s.gather_rows(&idx));
        let l0 = starts.l.as_ref().map(|l| l.gather_rows(&idx));

        let mut g = Graph::new(&self.store, &[ParamGroup::Actor]);
        let h = g.constant(h0)?;
        let s = g.constant(s0)?;
        let l = match &l0 {
            Some(l) => Some(g.constant(l.clone())?),
            None => None,
        };
        let traj = imagine(&mut g, &self.world, &self.actor, h, s, l, t.horizon, noise)?;
        let targets: Vec<Var> = traj
            .h
            .iter()
            .zip(&traj.s)
            .map(|(&h, &s)| self.critic.target_value(&mut g, h, s, l))
            .collect::<Result<_, _>>()?;
        let returns = lambda_return_on_tape(&mut g, &traj.rewards, &targets, t.discount, t.lambda)?;
        let loss = actor_loss(&mut g, &returns)?;
        let actor_value = g.value(loss).item();
        let feats: Vec<(Tensor, Tensor)> =
            (0..t.horizon).map(|k| (g.value(traj.h[k]).clone(), g.value(traj.s[k]).clone())).collect();
        let rets: Vec<Tensor> = returns.iter().map(|&r| g.value(r).clone()).collect();
        let grads = g.backward(loss)?;
        self.actor_opt.step(&mut self.store, &grads);

        let mut g = Graph::new(&self.store, &[ParamGroup::Critic]);
        let l = match &l0 {
            Some(l) => Some(g.constant(l.clone())?),
            None => None,
        };
        let mut values = Vec::with_capacity(t.horizon);
        let mut targets = Vec::with_capacity(t.horizon);
        for ((h, s), r) in feats.into_iter().zip(rets) {
            let h = g.constant(h)?;
            let s = g.constant(s)?;
            values.push(self.critic.value(&mut g, h, s, l)?);
            targets.push(g.constant(r)?);
        }
        let loss = critic_loss(&mut g, &values, &targets)?;
        let critic_value = g.value(loss).item();
        let grads = g.backward(loss)?;
        self.critic_opt.step(&mut self.store, &grads);

        self.behavior_steps += 1;
        self.critic.update_target(&mut self.store, t.target_update, self.behavior_steps);
        Ok(BehaviorLosses { actor: actor_value, critic: critic_value })
    }
}
