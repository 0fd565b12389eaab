use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffmath::grad_check;
use crate::nn::Adam;
use crate::worldmodel::RssmDims;

/// Explicit weighted sum of n-step returns.
fn lambda_oracle(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let h = r.len();
    (0..h)
        .map(|t| {
            let n_step = |n: usize| {
                let mut g = 0.0;
                for k in 0..n {
                    g += gamma.powi(k as i32) * r[t + k];
                }
                g + gamma.powi(n as i32) * v[t + n]
            };
            let last = h - t;
            let mut total = lambda.powi(last as i32 - 1) * n_step(last);
            for n in 1..last {
                total += (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(n);
            }
            total
        })
        .collect()
}

#[test]
fn lambda_return_hand_example() {
    let v = lambda_return(&[1.0, 1.0], &[0.0, 0.0, 10.0], 0.9, 0.5).unwrap();
    assert_abs_diff_eq!(v[1], 10.0, epsilon = 1e-12);
    assert_abs_diff_eq!(v[0], 5.5, epsilon = 1e-12);
    assert!(lambda_return(&[1.0], &[0.0], 0.9, 0.5).is_err());
}

#[test]
fn lambda_collapse_cases() {
    let r = [0.5, -1.0, 2.0];
    let v = [1.0, 3.0, -2.0, 4.0];
    let td = lambda_return(&r, &v, 0.9, 0.0).unwrap();
    for t in 0..3 {
        assert_abs_diff_eq!(td[t], r[t] + 0.9 * v[t + 1], epsilon = 1e-12);
    }
    let mc = lambda_return(&r, &v, 0.9, 1.0).unwrap();
    assert_abs_diff_eq!(mc[0], 0.5 - 0.9 + 0.81 * 2.0 + 0.729 * 4.0, epsilon = 1e-12);
}

#[test]
fn tape_lambda_return_matches_plain() {
    let mut t = Tape::new();
    let r: Vec<Var> = [0.3, -0.2].iter().map(|&x| t.constant(Tensor::matrix(1, 1, vec![x]).unwrap()).unwrap()).collect();
    let v: Vec<Var> = [1.0, 2.0, 3.0].iter().map(|&x| t.constant(Tensor::matrix(1, 1, vec![x]).unwrap()).unwrap()).collect();
    let out = lambda_return_on_tape(&mut t, &r, &v, 0.95, 0.7).unwrap();
    let plain = lambda_return(&[0.3, -0.2], &[1.0, 2.0, 3.0], 0.95, 0.7).unwrap();
    for k in 0..2 {
        assert_abs_diff_eq!(t.value(out[k]).item(), plain[k], epsilon = 1e-15);
    }
}

#[test]
fn critic_loss_arithmetic() {
    let mut t = Tape::new();
    let v = t.param(Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
    let r = t.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap()).unwrap();
    let l = critic_loss(&mut t, &[v], &[r]).unwrap();
    assert_eq!(t.value(l).item(), 2.0);
    let mut t = Tape::new();
    let v = t.param(Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap()).unwrap();
    let l = critic_loss(&mut t, &[v], &[v]).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
}

#[test]
fn target_updates() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let critic = Critic::new(&mut store, 4, 8, 2, &mut rng);
    assert_eq!(store.count(Some(ParamGroup::Target)), critic.param_count());
    let target_before = store.fingerprint(ParamGroup::Target);
    for id in store.ids_in(ParamGroup::Critic) {
        for v in store.get_mut(id).values_mut() {
            *v += 0.5;
        }
    }
    critic.update_target(&mut store, TargetUpdate::Soft { tau: 0.0 }, 1);
    assert_eq!(store.fingerprint(ParamGroup::Target), target_before);
    critic.update_target(&mut store, TargetUpdate::Hard { every: 100 }, 150);
    assert_eq!(store.fingerprint(ParamGroup::Target), target_before);
    let old: Vec<f64> = store.ids_in(ParamGroup::Target).iter().flat_map(|&i| store.get(i).values().to_vec()).collect();
    let online: Vec<f64> = store.ids_in(ParamGroup::Critic).iter().flat_map(|&i| store.get(i).values().to_vec()).collect();
    let mut soft = store.clone();
    critic.update_target(&mut soft, TargetUpdate::Soft { tau: 0.05 }, 1);
    let new: Vec<f64> = soft.ids_in(ParamGroup::Target).iter().flat_map(|&i| soft.get(i).values().to_vec()).collect();
    for k in 0..old.len() {
        assert_abs_diff_eq!(new[k], 0.05 * online[k] + 0.95 * old[k], epsilon = 1e-15);
    }
    critic.update_target(&mut store, TargetUpdate::Hard { every: 100 }, 200);
    let copied: Vec<f64> = store.ids_in(ParamGroup::Target).iter().flat_map(|&i| store.get(i).values().to_vec()).collect();
    assert_eq!(copied, online);
    let mut s1 = soft.clone();
    critic.update_target(&mut s1, TargetUpdate::Soft { tau: 1.0 }, 3);
    let t1: Vec<f64> = s1.ids_in(ParamGroup::Target).iter().flat_map(|&i| s1.get(i).values().to_vec()).collect();
    assert_eq!(t1, online);
}

struct Agent {
    store: ParamStore,
    world: WorldModel,
    actor: Actor,
    critic: Critic,
}

fn agent(task: usize, seed: u64) -> Agent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let dims = RssmDims { obs: 3, action: 2, task, deter: 6, stoch: 3, hidden: 8, embed: 5 };
    let world = WorldModel::new(&mut store, dims, &mut rng);
    let actor = Actor::new(&mut store, 9 + task, 8, 2, 2, &mut rng);
    let critic = Critic::new(&mut store, 9 + task, 8, 2, &mut rng);
    Agent { store, world, actor, critic }
}

fn start(g: &mut Graph, batch: usize, task: usize) -> (Var, Var, Option<Var>) {
    let h = g.constant(Tensor::full(&[batch, 6], 0.2)).unwrap();
    let s = g.constant(Tensor::full(&[batch, 3], -0.1)).unwrap();
    let l = (task > 0).then(|| g.constant(Tensor::full(&[batch, task], 0.7)).unwrap());
    (h, s, l)
}

#[test]
fn single_step_imagination() {
    let a = agent(2, 1);
    let mut g = Graph::inference(&a.store);
    let (h, s, l) = start(&mut g, 3, 2);
    let traj = imagine(&mut g, &a.world, &a.actor, h, s, l, 1, &mut NoiseSource::new(0)).unwrap();
    assert_eq!((traj.h.len(), traj.actions.len(), traj.rewards.len()), (2, 1, 1));
    assert!(g.value(traj.actions[0]).values().iter().all(|x| x.abs() <= 1.0));
    assert!(imagine(&mut g, &a.world, &a.actor, h, s, l, 0, &mut NoiseSource::new(0)).is_err());
}

#[test]
fn imagination_is_seeded() {
    let a = agent(2, 2);
    let run = |seed| {
        let mut g = Graph::inference(&a.store);
        let (h, s, l) = start(&mut g, 2, 2);
        let t = imagine(&mut g, &a.world, &a.actor, h, s, l, 5, &mut NoiseSource::new(seed)).unwrap();
        t.rewards.iter().map(|&r| g.value(r).clone()).collect::<Vec<_>>()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

fn actor_objective(a: &Agent, g: &mut Graph, seed: u64) -> Var {
    let (h, s, l) = start(g, 2, 2);
    let traj = imagine(g, &a.world, &a.actor, h, s, l, 4, &mut NoiseSource::new(seed)).unwrap();
    let values: Vec<Var> = traj.h.iter().zip(&traj.s).map(|(&h, &s)| a.critic.target_value(g, h, s, l).unwrap()).collect();
    let returns = lambda_return_on_tape(g, &traj.rewards, &values, 0.99, 0.95).unwrap();
    actor_loss(g, &returns).unwrap()
}

#[test]
fn actor_gradients_stay_in_actor() {
    let mut a = agent(2, 3);
    let before: Vec<String> = [ParamGroup::World, ParamGroup::Critic, ParamGroup::Target, ParamGroup::Encoder]
        .iter()
        .map(|&g| a.store.fingerprint(g))
        .collect();
    let mut g = Graph::new(&a.store, &[ParamGroup::Actor]);
    let loss = actor_objective(&a, &mut g, 0);
    let grads = g.backward(loss).unwrap();
    assert!(grads.keys().all(|&id| a.store.group(id) == ParamGroup::Actor));
    assert!(!grads.is_empty());
    let mut opt = Adam::new(&a.store, a.store.ids_in(ParamGroup::Actor), 1e-3, None);
    let actor_before = a.store.fingerprint(ParamGroup::Actor);
    opt.step(&mut a.store, &grads);
    assert_ne!(a.store.fingerprint(ParamGroup::Actor), actor_before);
    let after: Vec<String> = [ParamGroup::World, ParamGroup::Critic, ParamGroup::Target, ParamGroup::Encoder]
        .iter()
        .map(|&g| a.store.fingerprint(g))
        .collect();
    assert_eq!(before, after);
}

#[test]
fn critic_gradients_stay_in_critic() {
    let a = agent(2, 4);
    let mut g = Graph::new(&a.store, &[ParamGroup::Critic]);
    let (h, s, l) = start(&mut g, 2, 2);
    let traj = imagine(&mut g, &a.world, &a.actor, h, s, l, 3, &mut NoiseSource::new(1)).unwrap();
    let targets: Vec<Var> = traj.h.iter().zip(&traj.s).map(|(&h, &s)| a.critic.target_value(&mut g, h, s, l).unwrap()).collect();
    let returns = lambda_return_on_tape(&mut g, &traj.rewards, &targets, 0.99, 0.95).unwrap();
    let mut values = Vec::new();
    for t in 0..3 {
        let h = g.detach(traj.h[t]).unwrap();
        let s = g.detach(traj.s[t]).unwrap();
        values.push(a.critic.value(&mut g, h, s, l).unwrap());
    }
    let loss = critic_loss(&mut g, &values, &returns).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(!grads.is_empty());
    assert!(grads.keys().all(|&id| a.store.group(id) == ParamGroup::Critic));
}

#[test]
fn fixed_task_vector_across_rollout() {
    let a = agent(2, 5);
    let mut g = Graph::inference(&a.store);
    let (h, s, l) = start(&mut g, 2, 2);
    let traj = imagine(&mut g, &a.world, &a.actor, h, s, l, 6, &mut NoiseSource::new(0)).unwrap();
    assert_eq!(traj.l, l);
}

#[test]
fn constant_reward_world_gives_zero_actor_gradient() {
    // Horizon 1, no bootstrap: the loss is the negated constant reward.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let actor = Actor::new(&mut store, 3, 8, 1, 1, &mut rng);
    let mut g = Graph::new(&store, &[ParamGroup::Actor]);
    let h = g.constant(Tensor::full(&[4, 2], 0.3)).unwrap();
    let s = g.constant(Tensor::full(&[4, 1], 0.1)).unwrap();
    let a = actor.action(&mut g, h, s, None, Some(&mut NoiseSource::new(0))).unwrap();
    let zero = g.scale(a, 0.0).unwrap();
    let c = g.constant(Tensor::full(&[1], 1.5)).unwrap();
    let r = g.add(zero, c).unwrap();
    let v = g.constant(Tensor::zeros(&[4, 1])).unwrap();
    let ret = lambda_return_on_tape(&mut g, &[r], &[v, v], 0.99, 0.95).unwrap();
    let loss = actor_loss(&mut g, &ret).unwrap();
    assert_abs_diff_eq!(g.value(loss).item(), -1.5);
    let grads = g.backward(loss).unwrap();
    assert!(grads.values().all(|t| t.max_abs() < 1e-12));
}

#[test]
fn bandit_actor_finds_quadratic_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let actor = Actor::new(&mut store, 2, 16, 1, 1, &mut rng);
    let mut opt = Adam::new(&store, store.ids_in(ParamGroup::Actor), 1e-2, None);
    let mut noise = NoiseSource::new(8);
    let feats = (Tensor::full(&[16, 1], 0.0), Tensor::full(&[16, 1], 1.0));
    let mut losses = Vec::new();
    for _ in 0..600 {
        let mut g = Graph::new(&store, &[ParamGroup::Actor]);
        let h = g.constant(feats.0.clone()).unwrap();
        let s = g.constant(feats.1.clone()).unwrap();
        let a = actor.action(&mut g, h, s, None, Some(&mut noise)).unwrap();
        let target = g.constant(Tensor::full(&[1], 0.7)).unwrap();
        let d = g.sub(a, target).unwrap();
        let sq = g.square(d).unwrap();
        let r = g.scale(sq, -1.0).unwrap();
        let v = g.constant(Tensor::zeros(&[16, 1])).unwrap();
        let ret = lambda_return_on_tape(&mut g, &[r], &[v, v], 0.99, 0.95).unwrap();
        let loss = actor_loss(&mut g, &ret).unwrap();
        losses.push(g.value(loss).item());
        let grads = g.backward(loss).unwrap();
        opt.step(&mut store, &grads);
    }
    let mode = actor.act(&store, &feats.0.gather_rows(&[0]), &feats.1.gather_rows(&[0]), None, None).unwrap();
    assert!((mode[0] - 0.7).abs() < 0.05, "{mode:?}");
    let early: f64 = losses[..50].iter().sum::<f64>() / 50.0;
    let late: f64 = losses[550..].iter().sum::<f64>() / 50.0;
    assert!(late < early);
}

#[test]
fn actor_and_critic_losses_pass_gradient_checks() {
    let a = agent(2, 9);
    for group in [ParamGroup::Actor, ParamGroup::Critic] {
        let id = a.store.ids_in(group)[0];
        let err = grad_check(
            |t, x| {
                let mut g = Graph::with_tape(&a.store, &[], std::mem::take(t));
                g.override_param(id, x);
                let loss = if group == ParamGroup::Actor {
                    actor_objective(&a, &mut g, 3)
                } else {
                    let (h, s, l) = start(&mut g, 2, 2);
                    let v = a.critic.value(&mut g, h, s, l).unwrap();
                    let r = g.constant(Tensor::matrix(2, 1, vec![0.4, -1.2]).unwrap()).unwrap();
                    critic_loss(&mut g, &[v], &[r]).unwrap()
                };
                *t = g.into_tape();
                Ok(loss)
            },
            a.store.get(id),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{group:?}: {err}");
    }
}

proptest! {
    #[test]
    fn lambda_recursion_matches_weighted_sum(
        seed in any::<u64>(),
        h in 1usize..20,
        gamma in 0.0f64..=1.0,
        lambda in prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0],
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<f64> = (0..h).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..=h).map(|_| rng.random_range(-5.0..5.0)).collect();
        let rec = lambda_return(&r, &v, gamma, lambda).unwrap();
        let oracle = lambda_oracle(&r, &v, gamma, lambda);
        for t in 0..h {
            prop_assert!((rec[t] - oracle[t]).abs() < 1e-10);
        }
    }
}
