//! Seed-averaged checks against the generating equations of the linear
//! environment. Each oracle below is written out from the model equations,
//! not taken from the library.

#![allow(clippy::needless_range_loop)]

use cfrl_core::evaluation::{evaluate, EvalConfig};
use cfrl_core::policy::{argmax_lowest, train_baseline, FqiConfig, Method, Policy, TrainInputs};
use cfrl_core::preprocess::{estimate_marginals, fit_transition_mean, MeanModelConfig, TransitionMean};
use cfrl_core::{linear_env, sample_dataset, Dataset};

fn next_state_mean(s: f64, a: f64, z: f64, delta: f64) -> f64 {
    -0.3 + delta * (z - 0.5) + 0.5 * s + 0.4 * (a - 0.5) + 0.3 * s * (a - 0.5)
        + 0.3 * delta * s * (z - 0.5)
        + 0.4 * delta * (z - 0.5) * (a - 0.5)
}

fn reward_mean(s: f64, a: f64, z: f64, delta: f64) -> f64 {
    -0.3 + 0.3 * s + 0.5 * delta * z + 0.5 * a + 0.2 * delta * s * z + 0.7 * s * a - 1.0 * delta * z * a
}

#[test]
fn linear_mean_model_recovers_generating_coefficients() {
    let seeds = 20;
    // (intercept, slope) per (a, z), summed over seeds.
    let mut sums = [[(0.0, 0.0); 2]; 2];
    let mut reward = 0.0;
    for seed in 0..seeds {
        let data = sample_dataset(&linear_env(1.0), 2000, 10, 100 + seed).unwrap();
        let mu = fit_transition_mean(&data, &MeanModelConfig::default()).unwrap();
        for a in 0..2 {
            for z in 0..2 {
                let at0 = mu.mean(&[0.0], a, z).unwrap()[0];
                let at1 = mu.mean(&[1.0], a, z).unwrap()[0];
                sums[a][z].0 += at0;
                sums[a][z].1 += at1 - at0;
            }
        }
        reward += mu.mean(&[0.0], 1, 1).unwrap()[1];
    }
    let n = seeds as f64;
    for a in 0..2 {
        for z in 0..2 {
            let (af, zf) = (a as f64, z as f64);
            let intercept = next_state_mean(0.0, af, zf, 1.0);
            let slope = next_state_mean(1.0, af, zf, 1.0) - intercept;
            assert!((sums[a][z].0 / n - intercept).abs() < 0.05, "intercept (a={a}, z={z})");
            assert!((sums[a][z].1 / n - slope).abs() < 0.05, "slope (a={a}, z={z})");
        }
    }
    let expected = reward_mean(0.0, 1.0, 1.0, 1.0);
    assert!((expected + 0.3).abs() < 1e-12);
    assert!((reward / n - expected).abs() < 0.05);
}

#[test]
fn estimated_initial_means_are_consistent() {
    let data = sample_dataset(&linear_env(1.0), 10_000, 1, 31).unwrap();
    let m = estimate_marginals(&data).unwrap();
    assert!((m.initial_means[0][0] + 0.3).abs() < 0.05);
    assert!((m.initial_means[1][0] - 0.7).abs() < 0.05);
    assert!((m.attribute_probs[1] - 0.5).abs() < 0.02);
}

fn held_out(seed: u64) -> Dataset {
    sample_dataset(&linear_env(0.0), 1000, 1, seed).unwrap()
}

fn greedy(policy: &Policy, input: &[f64]) -> usize {
    argmax_lowest(&policy.action_probs(input).unwrap())
}

#[test]
fn attribute_is_irrelevant_when_delta_is_zero() {
    let env = linear_env(0.0);
    let data = sample_dataset(&env, 2000, 10, 41).unwrap();
    let inputs = TrainInputs { env: Some(&env), ..Default::default() };
    let config = FqiConfig::default();
    let full = train_baseline(Method::Full, &data, inputs, &config).unwrap();
    let unaware = train_baseline(Method::Unaware, &data, inputs, &config).unwrap();
    let oracle = train_baseline(Method::Oracle, &data, inputs, &config).unwrap();

    let test = held_out(42);
    let (mut full_agree, mut oracle_agree) = (0, 0);
    for traj in &test.trajectories {
        let s = traj.states[0][0];
        let mut with_z = vec![s, 0.0, 0.0];
        with_z[1 + traj.z] = 1.0;
        let base = greedy(&unaware, &[s]);
        full_agree += usize::from(greedy(&full, &with_z) == base);
        // Both counterfactual rows coincide when the attribute has no effect.
        oracle_agree += usize::from(greedy(&oracle, &[s, s]) == base);
    }
    assert!(full_agree >= 990, "full/unaware agreement {full_agree}/1000");
    assert!(oracle_agree >= 950, "oracle/unaware agreement {oracle_agree}/1000");
}

#[test]
fn full_policy_beats_random() {
    let env = linear_env(1.0);
    let data = sample_dataset(&env, 10_000, 10, 51).unwrap();
    let inputs = TrainInputs { env: Some(&env), ..Default::default() };
    let full = train_baseline(Method::Full, &data, inputs, &FqiConfig::default()).unwrap();
    let eval = EvalConfig { n_subjects: 10_000, seed: 52, ..EvalConfig::default() };
    let a = evaluate(&full, &env, &eval).unwrap();
    let b = evaluate(&Policy::random(2, 1), &env, &eval).unwrap();
    let pooled = (a.stderr_return.powi(2) + b.stderr_return.powi(2)).sqrt();
    assert!(a.mean_return - b.mean_return > 2.0 * pooled, "{} vs {}", a.mean_return, b.mean_return);
}
