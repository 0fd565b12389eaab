use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffmath::grad_check;
use crate::nn::Adam;

fn dims(task: usize) -> RssmDims {
    RssmDims { obs: 3, action: 2, task, deter: 8, stoch: 4, hidden: 10, embed: 6 }
}

fn model(task: usize, seed: u64) -> (ParamStore, WorldModel) {
    let mut store = ParamStore::new();
    let wm = WorldModel::new(&mut store, dims(task), &mut ChaCha8Rng::seed_from_u64(seed));
    (store, wm)
}

fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn prior_step_deterministic_and_mode() {
    let (store, wm) = model(2, 0);
    let run = |noise: Option<u64>, l: [f64; 2]| {
        let mut g = Graph::inference(&store);
        let h = g.constant(Tensor::full(&[1, 8], 0.1)).unwrap();
        let s = g.constant(Tensor::full(&[1, 4], -0.2)).unwrap();
        let a = g.constant(Tensor::full(&[1, 2], 0.3)).unwrap();
        let l = g.constant(Tensor::matrix(1, 2, l.to_vec()).unwrap()).unwrap();
        let mut ns = noise.map(NoiseSource::new);
        let p = wm.prior_step(&mut g, h, s, a, Some(l), ns.as_mut()).unwrap();
        (g.value(p.h).clone(), g.value(p.s).clone(), g.value(p.mean).clone(), g.value(p.std).clone())
    };
    assert_eq!(run(Some(3), [0.5, 0.5]), run(Some(3), [0.5, 0.5]));
    let mode = run(None, [0.5, 0.5]);
    assert_eq!(mode.1, mode.2);
    assert!(mode.3.values().iter().all(|&s| s >= MIN_STD));
    assert_ne!(run(None, [-1.0, 2.0]).0, mode.0);
}

#[test]
fn posterior_shares_recurrent_state_with_prior() {
    let (store, wm) = model(2, 1);
    let mut g = Graph::inference(&store);
    let h = g.constant(Tensor::full(&[2, 8], 0.1)).unwrap();
    let s = g.constant(Tensor::zeros(&[2, 4])).unwrap();
    let a = g.constant(Tensor::full(&[2, 2], 0.3)).unwrap();
    let o = g.constant(Tensor::full(&[2, 3], 7.0)).unwrap();
    let l = g.constant(Tensor::full(&[2, 2], 0.2)).unwrap();
    let post = wm.posterior_step(&mut g, h, s, a, o, Some(l), None).unwrap();
    let prior = wm.prior_step(&mut g, h, s, a, Some(l), None).unwrap();
    assert_eq!(g.value(post.h), g.value(prior.h));
    assert_eq!(g.value(post.prior_mean), g.value(prior.mean));
    assert!(g.value(post.post_std).values().iter().all(|&v| v >= MIN_STD));
}

#[test]
fn conditioned_model_requires_task() {
    let (store, wm) = model(2, 1);
    let mut g = Graph::inference(&store);
    let h = g.constant(Tensor::zeros(&[1, 8])).unwrap();
    assert!(matches!(wm.prior(&mut g, h, None), Err(DiffError::Usage(_))));
}

#[test]
fn vanilla_matches_unconditioned_reference_count() {
    let (_, wm) = model(0, 2);
    let d = dims(0);
    let lin = |i: usize, o: usize| i * o + o;
    let gru = 2 * lin(d.stoch + d.action + d.deter, d.deter) + lin(d.stoch + d.action, d.deter) + d.deter * d.deter;
    let head = |i: usize| lin(i, d.hidden) + 2 * lin(d.hidden, d.stoch);
    let mlp2 = |i: usize, o: usize| lin(i, d.hidden) + lin(d.hidden, d.hidden) + lin(d.hidden, o);
    let reference = gru
        + head(d.deter)
        + head(d.deter + d.embed)
        + lin(d.obs, d.hidden)
        + lin(d.hidden, d.embed)
        + mlp2(d.deter + d.stoch, d.obs)
        + mlp2(d.deter + d.stoch, 1);
    assert_eq!(wm.param_count(), reference);
    let (store, wm2) = model(0, 2);
    assert_eq!(store.count(None), wm2.param_count());
    let (_, conditioned) = model(3, 2);
    assert!(conditioned.param_count() > reference);
}

struct Batch {
    obs: Vec<Tensor>,
    actions: Vec<Tensor>,
    rewards: Vec<Tensor>,
    task: Tensor,
}

fn batch(rng: &mut impl Rng, len: usize, b: usize) -> Batch {
    Batch {
        obs: (0..len).map(|_| rand_tensor(rng, b, 3)).collect(),
        actions: (0..len).map(|_| rand_tensor(rng, b, 2)).collect(),
        rewards: (1..len).map(|_| rand_tensor(rng, b, 1)).collect(),
        task: rand_tensor(rng, b, 2),
    }
}

fn loss(wm: &WorldModel, g: &mut Graph, data: &Batch, weights: &LossWeights, seed: u64) -> ElboVars {
    let obs: Vec<Var> = data.obs.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let acts: Vec<Var> = data.actions.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let rews: Vec<Var> = data.rewards.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let l = g.constant(data.task.clone()).unwrap();
    let mut noise = NoiseSource::new(seed);
    let steps = wm.observe_sequence(g, &obs, &acts, Some(l), Some(&mut noise)).unwrap();
    assert_eq!(steps.len(), obs.len());
    wm.elbo_loss(g, &steps, &obs, &rews, Some(l), weights).unwrap()
}

#[test]
fn elbo_total_composition() {
    let (store, wm) = model(2, 3);
    let data = batch(&mut ChaCha8Rng::seed_from_u64(4), 5, 3);
    let weights = LossWeights { reward_scale: 2.5, kl_scale: 0.7, kl_balance: Some(0.8) };
    let mut g = Graph::inference(&store);
    let e = loss(&wm, &mut g, &data, &weights, 1).values(&g);
    assert_abs_diff_eq!(e.total, -(e.recon_obs + 2.5 * e.recon_reward) + 0.7 * e.kl_reg, epsilon = 1e-12);
    assert!(e.kl_reg >= 0.0);
}

#[test]
fn sequence_length_mismatch_rejected() {
    let (store, wm) = model(2, 3);
    let mut g = Graph::inference(&store);
    let o = g.constant(Tensor::zeros(&[1, 3])).unwrap();
    let l = g.constant(Tensor::zeros(&[1, 2])).unwrap();
    assert!(wm.observe_sequence(&mut g, &[o, o], &[], Some(l), None).is_err());
}

#[test]
fn kl_vanishes_when_posterior_equals_prior() {
    let (store, wm) = model(2, 3);
    let mut g = Graph::inference(&store);
    let h = g.constant(Tensor::zeros(&[2, 8])).unwrap();
    let l = g_const(&mut g, 2, 2);
    let (m, s) = wm.prior(&mut g, h, Some(l)).unwrap();
    let step = StepVars { h, s: m, prior_mean: m, prior_std: s, post_mean: m, post_std: s };
    let o = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let e = wm.elbo_loss(&mut g, &[step], &[o], &[], Some(l), &LossWeights::default()).unwrap();
    assert_eq!(g.value(e.kl).item(), 0.0);
}

fn g_const(g: &mut Graph, rows: usize, cols: usize) -> Var {
    g.constant(Tensor::full(&[rows, cols], 0.25)).unwrap()
}

#[test]
fn perfect_decoder_log_prob_at_mode() {
    let (store, wm) = model(0, 5);
    let mut g = Graph::inference(&store);
    let h = g.constant(Tensor::zeros(&[1, 8])).unwrap();
    let s = g.constant(Tensor::zeros(&[1, 4])).unwrap();
    let (o_hat, _) = wm.decode(&mut g, h, s, None).unwrap();
    let target = g.value(o_hat).clone();
    let t = g.constant(target).unwrap();
    let (m, sd) = wm.prior(&mut g, h, None).unwrap();
    let step = StepVars { h, s, prior_mean: m, prior_std: sd, post_mean: m, post_std: sd };
    let e = wm.elbo_loss(&mut g, &[step], &[t], &[], None, &LossWeights::default()).unwrap();
    let per_dim = -0.5 * (2.0 * std::f64::consts::PI).ln();
    assert_abs_diff_eq!(g.value(e.recon_obs).item(), 3.0 * per_dim, epsilon = 1e-12);
}

#[test]
fn full_balance_sends_kl_gradient_to_prior_only() {
    let (store, wm) = model(2, 6);
    // One step: the prior has no path back to the posterior sample.
    let data = batch(&mut ChaCha8Rng::seed_from_u64(7), 1, 2);
    let weights = LossWeights { kl_balance: Some(1.0), ..LossWeights::default() };
    let mut g = Graph::new(&store, &[ParamGroup::World]);
    let e = loss(&wm, &mut g, &data, &weights, 2);
    let grads = g.backward(e.kl).unwrap();
    let nonzero = |prefix: &str| {
        store.ids().filter(|&id| store.name(id).starts_with(prefix)).any(|id| {
            grads.get(&id).is_some_and(|t| t.values().iter().any(|&v| v != 0.0))
        })
    };
    assert!(nonzero("wm.prior"));
    assert!(!nonzero("wm.post"));
    assert!(!nonzero("wm.encoder"));
}

#[test]
fn balance_scales_prior_gradient() {
    let (store, wm) = model(2, 6);
    let data = batch(&mut ChaCha8Rng::seed_from_u64(15), 1, 2);
    let grad = |balance| {
        let mut g = Graph::new(&store, &[ParamGroup::World]);
        let e = loss(&wm, &mut g, &data, &LossWeights { kl_balance: balance, ..LossWeights::default() }, 2);
        g.backward(e.kl).unwrap()
    };
    let (plain, balanced) = (grad(None), grad(Some(0.8)));
    let id = store.ids().find(|&i| store.name(i) == "wm.prior.mean.w").unwrap();
    let (p, b) = (plain[&id].values(), balanced[&id].values());
    assert!(p.iter().any(|&v| v != 0.0));
    for (x, y) in p.iter().zip(b) {
        assert_abs_diff_eq!(0.8 * x, *y, epsilon = 1e-12);
    }
}

#[test]
fn backprop_reaches_first_step() {
    let (store, wm) = model(2, 8);
    let len = 6;
    let mut g = Graph::new(&store, &[ParamGroup::World]);
    let first = g.leaf(Tensor::full(&[1, 3], 0.4), true).unwrap();
    let mut obs = vec![first];
    for _ in 1..len {
        obs.push(g.constant(Tensor::full(&[1, 3], 0.1)).unwrap());
    }
    let acts: Vec<Var> = (0..len).map(|_| g.constant(Tensor::full(&[1, 2], 0.2)).unwrap()).collect();
    let l = g.constant(Tensor::full(&[1, 2], 0.3)).unwrap();
    let steps = wm.observe_sequence(&mut g, &obs, &acts, Some(l), None).unwrap();
    let last = steps.last().unwrap();
    let (_, r) = wm.decode(&mut g, last.h, last.s, Some(l)).unwrap();
    let loss = g.sum(r).unwrap();
    let (_, leaves) = g.backward_with_leaves(loss).unwrap();
    let gf = leaves.get(first).unwrap();
    assert!(gf.values().iter().any(|&v| v.abs() > 1e-12));
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    let (store, wm) = model(2, 10);
    let data = batch(&mut ChaCha8Rng::seed_from_u64(11), 3, 2);
    let weights = LossWeights { reward_scale: 1.5, kl_scale: 0.9, kl_balance: None };
    for name in ["wm.gru.update.w", "wm.post.mean.w", "wm.prior.std.w", "wm.obs_dec.h0.w", "wm.rew_dec.out.w", "wm.encoder.h0.w"] {
        let id = store.ids().find(|&i| store.name(i) == name).unwrap();
        let err = grad_check(
            |t, x| {
                let mut g = Graph::with_tape(&store, &[], std::mem::take(t));
                g.override_param(id, x);
                let e = loss(&wm, &mut g, &data, &weights, 5);
                *t = g.into_tape();
                Ok(e.total)
            },
            store.get(id),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn overfits_one_batch() {
    let (mut store, wm) = model(2, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let b = 4;
    let task = rand_tensor(&mut rng, b, 2);
    let data = Batch {
        obs: (0..6).map(|_| Tensor::full(&[b, 3], 0.5)).collect(),
        actions: (0..6).map(|_| Tensor::zeros(&[b, 2])).collect(),
        rewards: (1..6).map(|_| Tensor::full(&[b, 1], -1.0)).collect(),
        task,
    };
    let ids = store.ids_in(ParamGroup::World);
    let mut opt = Adam::new(&store, ids, 3e-3, Some(100.0));
    let mut recon = Vec::new();
    for step in 0..500 {
        let mut g = Graph::new(&store, &[ParamGroup::World]);
        let e = loss(&wm, &mut g, &data, &LossWeights::default(), step);
        recon.push(-g.value(e.recon_obs).item());
        let grads = g.backward(e.total).unwrap();
        opt.step(&mut store, &grads);
    }
    let first: f64 = recon[..50].iter().sum::<f64>() / 50.0;
    let last: f64 = recon[450..].iter().sum::<f64>() / 50.0;
    assert!(recon.iter().all(|v| v.is_finite()));
    assert!(last < first);
    // MSE of the decoder mean on the constant sequence
    let mut g = Graph::inference(&store);
    let obs: Vec<Var> = data.obs.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let acts: Vec<Var> = data.actions.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let l = g.constant(data.task.clone()).unwrap();
    let steps = wm.observe_sequence(&mut g, &obs, &acts, Some(l), None).unwrap();
    let mut mse = 0.0;
    for st in &steps {
        let (o_hat, _) = wm.decode(&mut g, st.h, st.s, Some(l)).unwrap();
        mse += g.value(o_hat).values().iter().map(|v| (v - 0.5).powi(2)).sum::<f64>() / (3 * b) as f64;
    }
    assert!(mse / steps.len() as f64 > 0.0);
    assert!(mse / (steps.len() as f64) < 0.01, "mse {mse}");
}

#[test]
fn filter_matches_mode_posterior() {
    let (store, wm) = model(2, 14);
    let state = RssmState::zeros(&dims(2), 1);
    let next = wm.filter(&store, &state, &[0.1, -0.1], &[0.2, 0.3, 0.4], Some(&[1.0, 0.0])).unwrap();
    let mut g = Graph::inference(&store);
    let h = g.constant(state.h.clone()).unwrap();
    let s = g.constant(state.s.clone()).unwrap();
    let a = g.constant(Tensor::matrix(1, 2, vec![0.1, -0.1]).unwrap()).unwrap();
    let o = g.constant(Tensor::matrix(1, 3, vec![0.2, 0.3, 0.4]).unwrap()).unwrap();
    let l = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
    let st = wm.posterior_step(&mut g, h, s, a, o, Some(l), None).unwrap();
    assert_eq!(&next.s, g.value(st.post_mean));
    assert_eq!(next.feature().len(), 12);
}
