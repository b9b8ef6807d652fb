//! Counterfactual unfairness, Monte Carlo value and fitted Q evaluation.
//!
//! Subjects are simulated under the evaluated policy. Each subject's
//! attribute is then set to every value in turn, with the subject's noises
//! and factual action history held fixed, and the policy is asked again in
//! each world. The CF metric is the largest, over pairs of worlds, average
//! rate at which the chosen actions disagree.
//!
//! Action draws use common random numbers: the uniform that resolves a
//! stochastic policy at `(subject, t)` is the same in every world, so a
//! policy that ignores the attribute scores exactly zero.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmdp::{draw_from, draw_noises, initial_state, replay, rollout_with, transition, Cmdp};
use crate::error::{arg_err, Error, Result};
use crate::policy::{
    targets_with, with_attribute, Augmentation, ExperienceSet, LinearBackup, Policy, QRegressor, Representation,
};
use crate::preprocess::DeploymentBuffer;
use crate::regression::{MlpModel, Targets};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_subjects: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_subjects: 10_000, horizon: 20, gamma: 0.9, seed: 0 }
    }
}

impl EvalConfig {
    fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.horizon == 0 {
            return arg_err("evaluation needs positive n_subjects and horizon");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return arg_err(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Max over ordered attribute pairs of the mean discordance rate.
    pub cf_metric: f64,
    pub cf_stderr: f64,
    /// `discordance[j][k]`: mean over subjects and steps of `1[A^j_t != A^k_t]`.
    pub discordance: Vec<Vec<f64>>,
    pub mean_return: f64,
    pub stderr_return: f64,
    pub n_subjects: usize,
    pub horizon: usize,
    pub gamma: f64,
}

/// Produces the policy input for one world, step by step.
enum InputBuilder<'a> {
    Raw,
    WithAttribute { z: usize, k: usize },
    Estimated(DeploymentBuffer<'a>),
    Oracle { env: &'a dyn Cmdp, noises: &'a [Vec<f64>], worlds: Vec<Vec<f64>> },
}

impl<'a> InputBuilder<'a> {
    fn new(policy: &'a Policy, env: &'a dyn Cmdp, z: usize, noises: &'a [Vec<f64>]) -> Result<Self> {
        Ok(match (&policy.contract, &policy.augmentation) {
            (Representation::Raw { .. }, _) => InputBuilder::Raw,
            (Representation::RawWithAttribute { attribute_count, .. }, _) => {
                InputBuilder::WithAttribute { z, k: *attribute_count }
            }
            (Representation::Augmented { .. }, Some(Augmentation::Estimated { mean_model, marginals })) => {
                InputBuilder::Estimated(DeploymentBuffer::new(mean_model, marginals, z))
            }
            (Representation::Augmented { .. }, Some(Augmentation::Oracle)) => InputBuilder::Oracle {
                env,
                noises,
                worlds: (0..env.attribute_count()).map(|k| initial_state(env, k, &noises[0])).collect(),
            },
            (Representation::Augmented { .. }, None) => {
                return arg_err("augmented policy needs a mean model and marginals (or oracle access) to deploy")
            }
        })
    }

    /// `prev` is `(t - 1, a_{t-1})` for `t > 0`.
    fn input(&mut self, s: &[f64], prev: Option<(usize, usize)>) -> Result<Vec<f64>> {
        match self {
            InputBuilder::Raw => Ok(s.to_vec()),
            InputBuilder::WithAttribute { z, k } => Ok(with_attribute(s, *z, *k)),
            InputBuilder::Estimated(buffer) => Ok(buffer.observe(s, prev.map(|p| p.1))?.concat()),
            InputBuilder::Oracle { env, noises, worlds } => {
                if let Some((t_prev, a)) = prev {
                    for (k, state) in worlds.iter_mut().enumerate() {
                        let (_, next) = transition(*env, state, a, k, &noises[t_prev], Some(&noises[t_prev + 1]));
                        *state = next.expect("next noise supplied");
                    }
                }
                Ok(worlds.concat())
            }
        }
    }
}

struct SubjectOutcome {
    discordance: Vec<Vec<f64>>,
    discounted_return: f64,
}

fn simulate_subject(policy: &Policy, env: &dyn Cmdp, cfg: &EvalConfig, i: usize) -> Result<SubjectOutcome> {
    let k = env.attribute_count();
    let mut rng = rng::stream(&[cfg.seed, tag::EVAL_SUBJECT, i as u64]);
    let z = draw_from(env.attribute_probs(), rng.random::<f64>());
    let noises = draw_noises(env, &mut rng, cfg.horizon);
    let mut action_rng = rng::stream(&[cfg.seed, tag::EVAL_ACTION, i as u64]);
    let uniforms: Vec<f64> = (0..cfg.horizon).map(|_| action_rng.random::<f64>()).collect();

    let mut builder = InputBuilder::new(policy, env, z, &noises)?;
    let mut prev: Option<(usize, usize)> = None;
    let factual = rollout_with(env, z, noises.clone(), |t, s| {
        let probs = policy.action_probs(&builder.input(s, prev)?)?;
        let a = draw_from(&probs, uniforms[t]);
        prev = Some((t, a));
        Ok(a)
    })?;

    // Actions each world would take at every step, given the factual history.
    // The factual world reproduces the rollout's own actions (same inputs,
    // same uniforms), so only the other worlds are queried.
    let mut world_actions = Vec::with_capacity(k);
    for w in 0..k {
        if w == z {
            world_actions.push(factual.actions.clone());
            continue;
        }
        let world = replay(env, w, &noises, &factual.actions);
        let mut builder = InputBuilder::new(policy, env, w, &noises)?;
        let mut actions = Vec::with_capacity(cfg.horizon);
        for t in 0..cfg.horizon {
            let prev = (t > 0).then(|| (t - 1, factual.actions[t - 1]));
            let probs = policy.action_probs(&builder.input(&world.states[t], prev)?)?;
            actions.push(draw_from(&probs, uniforms[t]));
        }
        world_actions.push(actions);
    }

    let horizon = cfg.horizon as f64;
    let discordance = (0..k)
        .map(|j| {
            (0..k)
                .map(|l| {
                    world_actions[j].iter().zip(&world_actions[l]).filter(|(a, b)| a != b).count() as f64 / horizon
                })
                .collect()
        })
        .collect();
    let mut discount = 1.0;
    let mut ret = 0.0;
    for r in &factual.rewards {
        ret += discount * r;
        discount *= cfg.gamma;
    }
    Ok(SubjectOutcome { discordance, discounted_return: ret })
}

fn mean_and_stderr(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Rolls out `policy` on `env` and reports the CF metric and discounted return.
pub fn evaluate(policy: &Policy, env: &dyn Cmdp, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if policy.contract.is_augmented() && policy.augmentation.is_none() {
        return arg_err("augmented policy needs a mean model and marginals (or oracle access) to deploy");
    }
    let expected_dim = match policy.contract {
        Representation::Raw { state_dim } => state_dim,
        Representation::RawWithAttribute { state_dim, attribute_count } => {
            if attribute_count != env.attribute_count() {
                return arg_err("policy and environment disagree on the attribute count");
            }
            state_dim
        }
        Representation::Augmented { state_dim, attribute_count } => {
            if attribute_count != env.attribute_count() {
                return arg_err("policy and environment disagree on the attribute count");
            }
            state_dim
        }
    };
    if expected_dim != env.state_dim() {
        return arg_err("policy and environment disagree on the state dimension");
    }
    let outcomes = (0..cfg.n_subjects)
        .into_par_iter()
        .map(|i| simulate_subject(policy, env, cfg, i))
        .collect::<Result<Vec<_>>>()?;

    let k = env.attribute_count();
    let n = outcomes.len() as f64;
    let mut discordance = vec![vec![0.0; k]; k];
    for o in &outcomes {
        for j in 0..k {
            for l in 0..k {
                discordance[j][l] += o.discordance[j][l];
            }
        }
    }
    let mut worst = (0, 0, 0.0);
    for (j, row) in discordance.iter_mut().enumerate() {
        for (l, v) in row.iter_mut().enumerate() {
            *v /= n;
            if j != l && *v > worst.2 {
                worst = (j, l, *v);
            }
        }
    }
    let (_, cf_stderr) = mean_and_stderr(outcomes.iter().map(|o| o.discordance[worst.0][worst.1]));
    let (mean_return, stderr_return) = mean_and_stderr(outcomes.iter().map(|o| o.discounted_return));
    Ok(EvalReport {
        cf_metric: worst.2,
        cf_stderr,
        discordance,
        mean_return,
        stderr_return,
        n_subjects: cfg.n_subjects,
        horizon: cfg.horizon,
        gamma: cfg.gamma,
    })
}

/// Counterfactual unfairness of `policy` (the full report; see [`EvalReport::cf_metric`]).
pub fn cf_metric(policy: &Policy, env: &dyn Cmdp, cfg: &EvalConfig) -> Result<EvalReport> {
    evaluate(policy, env, cfg)
}

/// Mean and standard error of `Σ_t γ^(t-1) r_t` over simulated subjects.
pub fn discounted_return(policy: &Policy, env: &dyn Cmdp, cfg: &EvalConfig) -> Result<(f64, f64)> {
    let report = evaluate(policy, env, cfg)?;
    Ok((report.mean_return, report.stderr_return))
}

/// FQE estimate with the spread of the per-subject initial-state values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FqeEstimate {
    pub value: f64,
    /// Standard error of the mean over initial states.
    pub stderr: f64,
}

/// Fitted Q evaluation: iterates `y_i = r_i + γ Σ_a π(a | s'_i) q(s'_i, a)`
/// and averages `Σ_a π(a | s_1) q(s_1, a)` over the initial states in `set`.
pub fn fqe_detailed(
    policy: &Policy,
    set: &ExperienceSet,
    gamma: f64,
    iterations: usize,
    regressor: &QRegressor,
    seed: u64,
) -> Result<FqeEstimate> {
    if set.representation != policy.contract {
        return arg_err(format!(
            "tuples carry {} states but the policy consumes {}",
            set.representation.name(),
            policy.contract.name()
        ));
    }
    if !(gamma > 0.0 && gamma < 1.0) || iterations == 0 {
        return arg_err("need gamma in (0, 1) and at least one iteration");
    }
    let next_probs: Vec<Option<Vec<f64>>> = set
        .tuples
        .iter()
        .map(|t| t.s_next.as_ref().map(|s| policy.action_probs(s)).transpose())
        .collect::<Result<_>>()?;
    let initial: Vec<&[f64]> = set.initial_states().collect();
    if initial.is_empty() {
        return arg_err("no initial states (t = 1) among the tuples");
    }
    let initial_probs = initial.iter().map(|s| policy.action_probs(s)).collect::<Result<Vec<_>>>()?;
    let expect = |probs: &[f64], q: &dyn Fn(usize) -> f64| probs.iter().enumerate().map(|(a, p)| p * q(a)).sum::<f64>();

    let values: Vec<f64> = match regressor {
        QRegressor::Linear { basis, ridge } => {
            let backup = LinearBackup::new(set, basis, *ridge)?;
            let mut w = DMatrix::zeros(backup.fm.dimension(), 1);
            for b in 0..iterations {
                let next = backup.next_values(&w);
                let y = targets_with(set, gamma, |i| {
                    next_probs[i].as_ref().map_or(0.0, |p| expect(p, &|a| next[a][i]))
                });
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Iteration { iteration: b + 1, source: Box::new(Error::Divergence { epoch: b + 1, loss: f64::NAN }) });
                }
                w = backup.solve(&y);
            }
            let model = crate::regression::model_from_weights(&backup.fm, &w, backup.ridge());
            initial
                .iter()
                .zip(&initial_probs)
                .map(|(s, p)| {
                    let q = (0..set.action_count).map(|a| Ok(model.predict(s, a)?[0])).collect::<Result<Vec<_>>>()?;
                    Ok(expect(p, &|a| q[a]))
                })
                .collect::<Result<_>>()?
        }
        QRegressor::Mlp { hidden, steps_per_iteration, learning_rate, batch_size } => {
            let mut sizes = vec![set.representation.dim()];
            sizes.extend_from_slice(hidden);
            sizes.push(set.action_count);
            let mut model = MlpModel::new(&sizes, seed)?;
            let inputs: Vec<Vec<f64>> = set.tuples.iter().map(|t| t.s.clone()).collect();
            let heads: Vec<usize> = set.tuples.iter().map(|t| t.a).collect();
            let mut batch_rng = rng::stream(&[seed, tag::BATCH]);
            for b in 0..iterations {
                let next: Vec<f64> = set
                    .tuples
                    .iter()
                    .zip(&next_probs)
                    .map(|(t, p)| match (&t.s_next, p) {
                        (Some(sn), Some(p)) => model.forward(sn).map(|q| expect(p, &|a| q[a])),
                        _ => Ok(0.0),
                    })
                    .collect::<Result<_>>()?;
                let y = targets_with(set, gamma, |i| next[i]);
                model
                    .train_steps(&inputs, Targets::Selected { heads: &heads, values: &y }, *steps_per_iteration, *learning_rate, *batch_size, &mut batch_rng)
                    .map_err(|e| Error::Iteration { iteration: b + 1, source: Box::new(e) })?;
            }
            initial
                .iter()
                .zip(&initial_probs)
                .map(|(s, p)| model.forward(s).map(|q| expect(p, &|a| q[a])))
                .collect::<Result<_>>()?
        }
    };
    let (value, stderr) = mean_and_stderr(values.iter().copied());
    Ok(FqeEstimate { value, stderr })
}

pub fn fqe(policy: &Policy, set: &ExperienceSet, gamma: f64, iterations: usize, regressor: &QRegressor) -> Result<f64> {
    Ok(fqe_detailed(policy, set, gamma, iterations, regressor, 0)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{linear_env, nonlinear_env, CmdpSpec};
    use crate::policy::{ExperienceTuple, Policy};
    use crate::regression::Basis;
    use rand::RngCore;

    fn small_eval(seed: u64) -> EvalConfig {
        EvalConfig { n_subjects: 2000, horizon: 20, gamma: 0.9, seed }
    }

    /// Unit reward everywhere, attribute-dependent states.
    struct ConstantReward;

    impl Cmdp for ConstantReward {
        fn attribute_probs(&self) -> &[f64] {
            &[0.5, 0.5]
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn action_count(&self) -> usize {
            2
        }
        fn initial_mean(&self, z: usize) -> Vec<f64> {
            vec![z as f64]
        }
        fn joint_mean(&self, s: &[f64], _a: usize, _z: usize) -> Vec<f64> {
            vec![0.5 * s[0], 1.0]
        }
        fn behavior_probs(&self, _s: &[f64], _z: usize) -> Vec<f64> {
            vec![0.5, 0.5]
        }
        fn sample_noise(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
            out[0] = (rng.next_u32() as f64 / u32::MAX as f64) - 0.5;
            out[1] = 0.0;
        }
    }

    #[test]
    fn random_policy_is_exactly_fair() {
        for env in [linear_env(1.0), nonlinear_env(2.0)] {
            let report = cf_metric(&Policy::random(2, 1), &env, &small_eval(1)).unwrap();
            assert_eq!(report.cf_metric, 0.0);
            assert_eq!(report.discordance, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        }
    }

    #[test]
    fn attribute_copying_policy_is_maximally_unfair() {
        let env = linear_env(1.0);
        let report = cf_metric(&Policy::fixed_map(vec![0, 1], 1), &env, &small_eval(2)).unwrap();
        assert_eq!(report.cf_metric, 1.0);
        assert_eq!(report.discordance[0][0], 0.0);
        assert_eq!(report.discordance[1][1], 0.0);
    }

    #[test]
    fn behavior_policy_discordance_matches_propensity_gap() {
        // Common random numbers: the draws disagree exactly when u falls
        // between the two worlds' propensities.
        let env = linear_env(1.0);
        let report = cf_metric(&Policy::behavior(&env), &env, &small_eval(3)).unwrap();
        let gap = env.behavior_probs(&[0.0], 1)[1] - env.behavior_probs(&[0.0], 0)[1];
        assert!((report.cf_metric - gap).abs() < 0.02, "{} vs {gap}", report.cf_metric);
        assert!((0.0..=1.0).contains(&report.cf_metric));
    }

    #[test]
    fn constant_reward_return_is_geometric() {
        let (mean, se) = discounted_return(&Policy::random(2, 1), &ConstantReward, &small_eval(4)).unwrap();
        let expected = (1.0 - 0.9f64.powi(20)) / 0.1;
        assert!((mean - expected).abs() < 1e-12);
        assert!(se < 1e-12);
        assert!((expected - 8.7842).abs() < 1e-4);
    }

    #[test]
    fn tiny_discount_returns_first_reward() {
        let env = linear_env(1.0);
        let cfg = EvalConfig { gamma: 1e-6, ..small_eval(5) };
        let (mean, _) = discounted_return(&Policy::behavior(&env), &env, &cfg).unwrap();
        let one_step = EvalConfig { horizon: 1, ..cfg };
        let (first, se) = discounted_return(&Policy::behavior(&env), &env, &one_step).unwrap();
        assert!((mean - first).abs() < 1e-4 + 3.0 * se);
    }

    #[test]
    fn augmented_policy_without_deployment_is_rejected() {
        let env = linear_env(1.0);
        let data = crate::cmdp::sample_dataset(&env, 100, 4, 1).unwrap();
        let set = crate::policy::oracle_tuples(&data, &env, false).unwrap();
        let q = crate::policy::fqi(&set, &crate::policy::FqiConfig::default()).unwrap();
        let policy = crate::policy::greedy_policy(q);
        assert!(matches!(cf_metric(&policy, &env, &small_eval(1)), Err(Error::Argument(_))));
    }

    #[test]
    fn report_is_deterministic() {
        let env = nonlinear_env(1.0);
        let p = Policy::behavior(&env);
        assert_eq!(evaluate(&p, &env, &small_eval(9)).unwrap(), evaluate(&p, &env, &small_eval(9)).unwrap());
    }

    fn self_loop() -> ExperienceSet {
        ExperienceSet::new(
            Representation::Raw { state_dim: 1 },
            1,
            vec![ExperienceTuple { s: vec![0.0], a: 0, r: 1.0, s_next: Some(vec![0.0]), t: 1 }],
        )
        .unwrap()
    }

    #[test]
    fn fqe_fixed_points() {
        let linear = QRegressor::Linear { basis: Basis::Tabular { n_states: 1 }, ridge: 1e-12 };
        let policy = Policy::random(1, 1);
        let v = fqe(&policy, &self_loop(), 0.9, 300, &linear).unwrap();
        assert!((v - 10.0).abs() < 1e-6);

        let mut zero = self_loop();
        zero.tuples[0].r = 0.0;
        assert_eq!(fqe(&policy, &zero, 0.9, 50, &linear).unwrap(), 0.0);

        let mismatched = Policy::behavior(&CmdpSpec::new(crate::cmdp::EnvKind::Linear, 1.0));
        assert!(fqe(&mismatched, &self_loop(), 0.9, 5, &linear).is_err());
    }
}
