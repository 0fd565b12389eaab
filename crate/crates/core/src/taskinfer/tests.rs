use std::time::Instant;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffmath::grad_check;

fn obs(x: &[f64], v: &[f64]) -> LatentObservation<f64> {
    LatentObservation { x: x.to_vec(), sigma_sq: v.to_vec() }
}

/// Multiplies the Gaussian factors as log-densities, then reads the
/// quadratic's curvature and slope off three evaluations.
fn brute_force(prior: &TaskPrior<f64>, set: &[LatentObservation<f64>]) -> TaskBelief<f64> {
    let mut mu_l = Vec::new();
    let mut sigma_l_sq = Vec::new();
    for j in 0..prior.dim() {
        let log_density = |l: f64| {
            let mut s = -(l - prior.mu_0[j]).powi(2) / (2.0 * prior.sigma_0_sq[j]);
            for o in set {
                s -= (l - o.x[j]).powi(2) / (2.0 * o.sigma_sq[j]);
            }
            s
        };
        let (a, b, c) = (log_density(-1.0), log_density(0.0), log_density(1.0));
        let curvature = (a - 2.0 * b + c) / 2.0;
        let slope = (c - a) / 2.0;
        let var = -0.5 / curvature;
        sigma_l_sq.push(var);
        mu_l.push(slope * var);
    }
    TaskBelief { mu_l, sigma_l_sq }
}

fn random_set(rng: &mut impl Rng, n: usize, d: usize) -> Vec<LatentObservation<f64>> {
    (0..n)
        .map(|_| LatentObservation {
            x: (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
            sigma_sq: (0..d).map(|_| rng.random_range(0.1..5.0)).collect(),
        })
        .collect()
}

#[test]
fn empty_set_returns_prior() {
    let prior = TaskPrior { mu_0: vec![0.3, -1.0], sigma_0_sq: vec![2.0, 0.5] };
    let b = aggregate(&prior, &[]).unwrap();
    assert_eq!(b, TaskBelief::from(prior));
}

#[test]
fn single_and_double_observation() {
    let prior = TaskPrior::standard(1);
    let b = aggregate(&prior, &[obs(&[1.0], &[1.0])]).unwrap();
    assert_abs_diff_eq!(b.mu_l[0], 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(b.sigma_l_sq[0], 0.5, epsilon = 1e-15);
    let b = aggregate(&prior, &[obs(&[1.0], &[1.0]), obs(&[3.0], &[1.0])]).unwrap();
    assert_abs_diff_eq!(b.mu_l[0], 4.0 / 3.0, epsilon = 1e-15);
    assert_abs_diff_eq!(b.sigma_l_sq[0], 1.0 / 3.0, epsilon = 1e-15);
}

#[test]
fn bad_variances_rejected() {
    let prior = TaskPrior::standard(1);
    assert!(matches!(aggregate(&prior, &[obs(&[1.0], &[0.0])]), Err(DiffError::Domain { .. })));
    assert!(matches!(aggregate(&prior, &[obs(&[1.0], &[-1.0])]), Err(DiffError::Domain { .. })));
    let bad = TaskPrior { mu_0: vec![0.0], sigma_0_sq: vec![0.0] };
    assert!(aggregate(&bad, &[]).is_err());
}

#[test]
fn matches_brute_force_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.random_range(0..30);
        let prior = TaskPrior {
            mu_0: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            sigma_0_sq: (0..4).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
        let set = random_set(&mut rng, n, 4);
        let a = aggregate(&prior, &set).unwrap();
        let b = brute_force(&prior, &set);
        for j in 0..4 {
            assert_abs_diff_eq!(a.mu_l[j], b.mu_l[j], epsilon = 1e-10);
            assert_abs_diff_eq!(a.sigma_l_sq[j], b.sigma_l_sq[j], epsilon = 1e-10);
        }
    }
}

#[test]
fn probabilistic_attention() {
    let prior = TaskPrior::standard(1);
    let b = aggregate(&prior, &[obs(&[2.0], &[0.2]), obs(&[-2.0], &[3.0])]).unwrap();
    assert!((b.mu_l[0] - 2.0).abs() < (b.mu_l[0] + 2.0).abs());
}

#[test]
fn aggregation_cost_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let prior = TaskPrior::standard(20);
    let time = |n: usize, rng: &mut ChaCha8Rng| {
        let set = random_set(rng, n, 20);
        let start = Instant::now();
        for _ in 0..20 {
            std::hint::black_box(aggregate(&prior, &set).unwrap());
        }
        start.elapsed().as_secs_f64() / n as f64
    };
    // Per-element time, best of several rounds to damp scheduler noise.
    let mut ratio = f64::INFINITY;
    for _ in 0..5 {
        let small = time(512, &mut rng);
        let large = time(1024, &mut rng);
        ratio = ratio.min(large / small);
    }
    assert!(ratio <= 1.5, "per-element cost grew {ratio:.2}x");
}

#[test]
fn zero_variance_sample_is_mean() {
    let b = TaskBelief { mu_l: vec![0.5, -2.0], sigma_l_sq: vec![0.0, 0.0] };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(b.sample(&mut rng), b.mean());
    let scaled = TaskBelief { mu_l: b.mu_l.clone(), sigma_l_sq: vec![7.0, 0.1] };
    assert_eq!(scaled.mean(), b.mean());
}

#[test]
fn sample_is_seeded_and_unbiased() {
    let b: TaskBelief<f64> = TaskBelief { mu_l: vec![1.5, -0.5], sigma_l_sq: vec![0.25, 4.0] };
    let draw = |seed| b.sample(&mut ChaCha8Rng::seed_from_u64(seed));
    assert_eq!(draw(9), draw(9));
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 100_000;
    let mut sum = [0.0; 2];
    for _ in 0..n {
        let s = b.sample(&mut rng);
        sum[0] += s[0];
        sum[1] += s[1];
    }
    for (j, s) in sum.iter().enumerate() {
        let sigma = b.sigma_l_sq[j].sqrt();
        assert!((s / n as f64 - b.mu_l[j]).abs() < 0.01 * sigma);
    }
}

fn encoder(width: usize, latent: usize) -> (ParamStore, SetEncoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let enc = SetEncoder::new(&mut store, width, 16, latent, &mut rng);
    (store, enc)
}

#[test]
fn encode_set_masks_and_duplicates() {
    let (store, enc) = encoder(4, 3);
    let rows = Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![0.1, 0.2, 0.3, 0.4], vec![9.0, 9.0, 9.0, 9.0]]).unwrap();
    assert!(enc.encode_set(&store, &rows, &[false; 3]).unwrap().is_empty());
    let out = enc.encode_set(&store, &rows, &[true, true, false]).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0], out[1]);
    assert!(out.iter().all(|o| o.sigma_sq.iter().all(|&v| v >= VARIANCE_FLOOR)));
    let narrow = Tensor::from_rows(&[vec![0.0; 3]]).unwrap();
    assert!(matches!(enc.encode_set(&store, &narrow, &[true]), Err(DiffError::Shape { .. })));
}

#[test]
fn tape_aggregation_matches_plain() {
    let (store, enc) = encoder(4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 5;
    let rows: Vec<Vec<f64>> = (0..2 * n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let rows = Tensor::from_rows(&rows).unwrap();
    let mask: Vec<bool> = (0..2 * n).map(|i| i % n >= 2).collect();
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let prior = TaskPrior::standard(3);

    let mut g = Graph::inference(&store);
    let b = enc.infer(&mut g, &rows, &weights, 2, &prior).unwrap();
    for set in 0..2 {
        let idx: Vec<usize> = (set * n..(set + 1) * n).collect();
        let plain = enc.belief(&store, &rows.gather_rows(&idx), &mask[set * n..(set + 1) * n], &prior).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(g.value(b.mu).row(set)[j], plain.mu_l[j], epsilon = 1e-12);
            assert_abs_diff_eq!(g.value(b.var).row(set)[j], plain.sigma_l_sq[j], epsilon = 1e-12);
        }
    }
}

#[test]
fn all_masked_set_gives_prior_on_tape() {
    let (store, enc) = encoder(4, 3);
    let mut g = Graph::inference(&store);
    let b = enc.infer(&mut g, &Tensor::zeros(&[4, 4]), &[0.0; 4], 1, &TaskPrior::standard(3)).unwrap();
    assert_eq!(g.value(b.mu).values(), &[0.0; 3]);
    assert_eq!(g.value(b.var).values(), &[1.0; 3]);
}

#[test]
fn belief_sample_gradient_reaches_observations() {
    let point = Tensor::from_rows(&[vec![0.3, -0.2], vec![1.1, 0.4], vec![-0.7, 0.9]]).unwrap();
    let err = grad_check(
        |t, x| {
            let sp = t.softplus(x)?;
            let floor = t.constant(Tensor::full(&[2], 0.5))?;
            let var = t.add(sp, floor)?;
            let b = aggregate_on_tape(t, x, var, &[1.0, 1.0, 0.0], 1, &TaskPrior::standard(2))?;
            let s = sample_task(t, b, &mut NoiseSource::new(4))?;
            let sq = t.square(s)?;
            t.sum(sq)
        },
        &point,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn tape_sample_deterministic_and_zero_noise_is_mean() {
    let (store, enc) = encoder(4, 3);
    let rows = Tensor::full(&[3, 4], 0.2);
    let prior = TaskPrior::standard(3);
    let draw = |seed| {
        let mut g = Graph::inference(&store);
        let b = enc.infer(&mut g, &rows, &[1.0; 3], 1, &prior).unwrap();
        let s = sample_task(&mut g, b, &mut NoiseSource::new(seed)).unwrap();
        (g.value(s).clone(), g.value(mean_task(b)).clone())
    };
    assert_eq!(draw(1), draw(1));
    assert_ne!(draw(1).0, draw(1).1);
}

proptest! {
    #[test]
    fn permutation_invariant_bitwise(seed in any::<u64>(), n in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = TaskPrior::standard(3);
        let mut set = random_set(&mut rng, n, 3);
        let a = aggregate(&prior, &set).unwrap();
        set.shuffle(&mut rng);
        let b = aggregate(&prior, &set).unwrap();
        for j in 0..3 {
            prop_assert_eq!(a.mu_l[j].to_bits(), b.mu_l[j].to_bits());
            prop_assert_eq!(a.sigma_l_sq[j].to_bits(), b.sigma_l_sq[j].to_bits());
        }
    }

    #[test]
    fn sequential_equals_batch(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = TaskPrior::standard(3);
        let set = random_set(&mut rng, n, 3);
        let batch = aggregate(&prior, &set).unwrap();
        let mut cur = prior.clone();
        for o in &set {
            let b = aggregate(&cur, std::slice::from_ref(o)).unwrap();
            // precision never decreases
            for j in 0..3 {
                prop_assert!(b.sigma_l_sq[j] <= cur.sigma_0_sq[j]);
            }
            cur = TaskPrior { mu_0: b.mu_l, sigma_0_sq: b.sigma_l_sq };
        }
        for j in 0..3 {
            prop_assert!((cur.mu_0[j] - batch.mu_l[j]).abs() < 1e-10);
            prop_assert!((cur.sigma_0_sq[j] - batch.sigma_l_sq[j]).abs() < 1e-10);
        }
    }
}
