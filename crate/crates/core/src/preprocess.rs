//! Sequential counterfactual preprocessing.
//!
//! Under additive noise, the exogenous noise of a step is the residual
//! `observed - mu(previous, action, z)`. Adding that residual back onto the
//! mean prediction in another attribute world transports the observation
//! there. Doing this forward in time, one world per attribute value, turns
//! each observed state into an augmented state holding every
//! counterfactual version of it, and each reward into an
//! attribute-probability-weighted average of its counterfactual versions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmdp::{Cmdp, CmdpSpec, Dataset};
use crate::error::{arg_err, Error, Result};
use crate::regression::{
    design_matrix, fit_mlp, model_from_weights, target_matrix, Basis, FeatureMap, LeastSquares, LinearModel,
    MlpModel, TrainConfig, DEFAULT_RIDGE,
};

/// Anything that can predict `(E[S_{t+1}], E[R_t])` at `(s, a, z)`.
pub trait TransitionMean: Send + Sync {
    fn mean(&self, s: &[f64], a: usize, z: usize) -> Result<Vec<f64>>;
}

impl<T: Cmdp + ?Sized> TransitionMean for T {
    fn mean(&self, s: &[f64], a: usize, z: usize) -> Result<Vec<f64>> {
        Ok(self.joint_mean(s, a, z))
    }
}

/// Fitted transition mean `mu_hat(s, a, z)`: one joint model per attribute
/// value with `state_dim + 1` output heads (next state, then reward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MeanModel {
    Linear { per_attribute: Vec<LinearModel> },
    Mlp { per_attribute: Vec<MlpModel> },
    /// The simulator's own mean function.
    Exact { env: CmdpSpec },
}

impl MeanModel {
    pub fn descriptor(&self) -> String {
        match self {
            MeanModel::Linear { per_attribute } => format!(
                "linear per attribute ({}): {}",
                per_attribute.len(),
                per_attribute.first().map(|m| m.feature_map.descriptor()).unwrap_or_default()
            ),
            MeanModel::Mlp { per_attribute } => format!(
                "mlp per attribute ({}): {:?}",
                per_attribute.len(),
                per_attribute.first().map(|m| m.sizes.clone()).unwrap_or_default()
            ),
            MeanModel::Exact { env } => format!("exact {} (delta = {})", env.kind, env.delta),
        }
    }
}

impl TransitionMean for MeanModel {
    fn mean(&self, s: &[f64], a: usize, z: usize) -> Result<Vec<f64>> {
        let missing = || Error::Argument(format!("mean model has no submodel for attribute {z}"));
        match self {
            MeanModel::Linear { per_attribute } => per_attribute.get(z).ok_or_else(missing)?.predict(s, a),
            MeanModel::Mlp { per_attribute } => per_attribute.get(z).ok_or_else(missing)?.predict(s, a),
            MeanModel::Exact { env } => {
                if z >= env.attribute_count() {
                    return Err(missing());
                }
                if s.len() != env.state_dim() || a >= env.action_count() {
                    return arg_err("state or action incompatible with the environment");
                }
                Ok(env.joint_mean(s, a, z))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MeanModelConfig {
    /// Per-action, per-attribute least squares over `basis(s)`.
    Linear { basis: Basis, ridge: f64 },
    /// Per-attribute network over `s ++ one_hot(a)`.
    Mlp { hidden: Vec<usize>, train: TrainConfig },
}

impl Default for MeanModelConfig {
    fn default() -> Self {
        MeanModelConfig::Linear { basis: Basis::Affine, ridge: DEFAULT_RIDGE }
    }
}

impl MeanModelConfig {
    /// The network recipe used for transition fitting in the reference experiments.
    pub fn reference_mlp(seed: u64) -> Self {
        MeanModelConfig::Mlp { hidden: vec![64, 64], train: TrainConfig { seed, ..TrainConfig::default() } }
    }
}

struct Rows {
    states: Vec<Vec<f64>>,
    actions: Vec<usize>,
    targets: Vec<Vec<f64>>,
}

impl Rows {
    fn new() -> Self {
        Rows { states: Vec::new(), actions: Vec::new(), targets: Vec::new() }
    }

    fn push(&mut self, s: &[f64], a: usize, y: Vec<f64>) {
        self.states.push(s.to_vec());
        self.actions.push(a);
        self.targets.push(y);
    }
}

fn check_coverage(rows: &Rows, z: usize, action_count: usize, min_rows: usize, what: &str) -> Result<()> {
    let mut counts = vec![0usize; action_count];
    for &a in &rows.actions {
        counts[a] += 1;
    }
    for (a, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::Coverage(format!("no {what} observed in cell (a = {a}, z = {z})")));
        }
        if c < min_rows {
            return Err(Error::Coverage(format!(
                "cell (a = {a}, z = {z}) has {c} {what}, needs at least {min_rows}"
            )));
        }
    }
    Ok(())
}

fn solve_heads(fm: &FeatureMap, rows: &Rows, ridge: f64) -> Result<nalgebra::DMatrix<f64>> {
    let design = design_matrix(fm, &rows.states, &rows.actions)?;
    let y = target_matrix(&rows.targets)?;
    Ok(LeastSquares::new_auto(design, ridge)?.solve(&y))
}

/// Fits `mu_hat(s, a, z)` by least squares (or a network) separately for
/// each attribute value.
///
/// The next-state heads use the within-trajectory pairs `t = 1..T-1`; the
/// reward head uses all `t = 1..T` for the linear model. The network variant
/// trains one joint model on the `t < T` pairs.
pub fn fit_transition_mean(data: &Dataset, config: &MeanModelConfig) -> Result<MeanModel> {
    let d = data.state_dim;
    let k = data.attribute_count;
    let mut state_rows: Vec<Rows> = (0..k).map(|_| Rows::new()).collect();
    let mut reward_rows: Vec<Rows> = (0..k).map(|_| Rows::new()).collect();
    let mut joint_rows: Vec<Rows> = (0..k).map(|_| Rows::new()).collect();
    for traj in &data.trajectories {
        let horizon = traj.horizon();
        for t in 0..horizon {
            let (s, a) = (&traj.states[t], traj.actions[t]);
            reward_rows[traj.z].push(s, a, vec![traj.rewards[t]]);
            if t + 1 < horizon {
                state_rows[traj.z].push(s, a, traj.states[t + 1].clone());
                let mut y = traj.states[t + 1].clone();
                y.push(traj.rewards[t]);
                joint_rows[traj.z].push(s, a, y);
            }
        }
    }
    let has_transitions = data.horizon() >= 2;

    match config {
        MeanModelConfig::Linear { basis, ridge } => {
            let fm = FeatureMap::new(basis.clone(), d, data.action_count);
            let min_rows = basis.dimension(d);
            let mut per_attribute = Vec::with_capacity(k);
            for z in 0..k {
                check_coverage(&reward_rows[z], z, data.action_count, min_rows, "rewards")?;
                let state_w = if has_transitions {
                    check_coverage(&state_rows[z], z, data.action_count, min_rows, "transitions")?;
                    solve_heads(&fm, &state_rows[z], *ridge)?
                } else {
                    nalgebra::DMatrix::zeros(fm.dimension(), d)
                };
                let reward_w = solve_heads(&fm, &reward_rows[z], *ridge)?;
                let mut w = nalgebra::DMatrix::zeros(fm.dimension(), d + 1);
                w.view_mut((0, 0), (fm.dimension(), d)).copy_from(&state_w);
                w.set_column(d, &reward_w.column(0));
                per_attribute.push(model_from_weights(&fm, &w, *ridge));
            }
            Ok(MeanModel::Linear { per_attribute })
        }
        MeanModelConfig::Mlp { hidden, train } => {
            if !has_transitions {
                return arg_err("network transition fitting needs horizon >= 2");
            }
            let mut per_attribute = Vec::with_capacity(k);
            for (z, rows) in joint_rows.iter().enumerate() {
                check_coverage(rows, z, data.action_count, 1, "transitions")?;
                let template = MlpModel::new(&[d + data.action_count, 1], 0)?.with_action_inputs(data.action_count);
                let inputs = rows
                    .states
                    .iter()
                    .zip(&rows.actions)
                    .map(|(s, &a)| template.encode(s, a))
                    .collect::<Result<Vec<_>>>()?;
                let cfg = TrainConfig { seed: crate::rng::derive_seed(&[train.seed, z as u64]), ..train.clone() };
                let model = fit_mlp(&inputs, &rows.targets, hidden, &cfg)?.with_action_inputs(data.action_count);
                per_attribute.push(model);
            }
            Ok(MeanModel::Mlp { per_attribute })
        }
    }
}

/// Empirical `E[S_1 | Z = z]` and `P(Z = z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub initial_means: Vec<Vec<f64>>,
    pub attribute_probs: Vec<f64>,
}

impl Marginals {
    /// The true marginals of a simulator.
    pub fn exact(env: &dyn Cmdp) -> Self {
        Marginals {
            initial_means: (0..env.attribute_count()).map(|z| env.initial_mean(z)).collect(),
            attribute_probs: env.attribute_probs().to_vec(),
        }
    }

    pub fn attribute_count(&self) -> usize {
        self.attribute_probs.len()
    }

    pub fn state_dim(&self) -> usize {
        self.initial_means.first().map_or(0, Vec::len)
    }

    fn check(&self, state_dim: usize, k: usize) -> Result<()> {
        if self.attribute_count() != k || self.initial_means.len() != k {
            return arg_err(format!("marginals cover {} attribute values, data has {k}", self.attribute_count()));
        }
        if self.initial_means.iter().any(|m| m.len() != state_dim) {
            return arg_err(format!("marginal means must have dimension {state_dim}"));
        }
        Ok(())
    }

    /// Line-4 transport of an initial state into every world.
    fn transport_initial(&self, s1: &[f64], z: usize) -> Vec<Vec<f64>> {
        let factual = &self.initial_means[z];
        self.initial_means
            .iter()
            .map(|target| {
                s1.iter()
                    .zip(target.iter().zip(factual))
                    .map(|(s, (m_cf, m_f))| s + (m_cf - m_f))
                    .collect()
            })
            .collect()
    }
}

pub fn estimate_marginals(data: &Dataset) -> Result<Marginals> {
    let k = data.attribute_count;
    let d = data.state_dim;
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for traj in &data.trajectories {
        counts[traj.z] += 1;
        for (acc, s) in sums[traj.z].iter_mut().zip(&traj.states[0]) {
            *acc += s;
        }
    }
    if let Some(z) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Coverage(format!("attribute value {z} never observed")));
    }
    let n = data.len() as f64;
    Ok(Marginals {
        initial_means: sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
            .collect(),
        attribute_probs: counts.iter().map(|&c| c as f64 / n).collect(),
    })
}

/// One preprocessed step of one subject.
///
/// `aug_state[k]` is the estimated state in attribute world `k`; the row at
/// the subject's own `z` is the observed state. `aug_next_state` is absent at
/// the final step, where the next state was never observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedTuple {
    pub subject_id: usize,
    /// One-based time index.
    pub t: usize,
    pub z: usize,
    pub aug_state: Vec<Vec<f64>>,
    pub action: usize,
    pub aug_reward: f64,
    pub aug_next_state: Option<Vec<Vec<f64>>>,
}

impl AugmentedTuple {
    pub fn flat_state(&self) -> Vec<f64> {
        self.aug_state.concat()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessedDataset {
    pub state_dim: usize,
    pub action_count: usize,
    pub attribute_count: usize,
    pub horizon: usize,
    /// Subject-major, time-ordered.
    pub tuples: Vec<AugmentedTuple>,
    pub marginals: Marginals,
    pub mean_model: String,
}

impl PreprocessedDataset {
    pub fn subject(&self, i: usize) -> &[AugmentedTuple] {
        &self.tuples[i * self.horizon..(i + 1) * self.horizon]
    }
}

fn weighted_reward(probs: &[f64], rewards: &[f64]) -> f64 {
    probs.iter().zip(rewards).map(|(p, r)| p * r).sum()
}

/// Transported states (absent past the last step) and rewards, per world.
type Transported = (Option<Vec<Vec<f64>>>, Vec<f64>);

/// One forward step of the recursion: transports `(s_t, r_{t-1})` from the
/// factual world into every world, given the previous augmented state.
fn transport_step(
    mu: &dyn TransitionMean,
    prev_aug: &[Vec<f64>],
    a_prev: usize,
    z: usize,
    s_t: Option<&[f64]>,
    r_prev: f64,
) -> Result<Transported> {
    let d = prev_aug[z].len();
    let factual = mu.mean(&prev_aug[z], a_prev, z)?;
    if factual.len() != d + 1 {
        return arg_err(format!("mean model returns {} heads, expected {}", factual.len(), d + 1));
    }
    let mut states = s_t.map(|_| Vec::with_capacity(prev_aug.len()));
    let mut rewards = Vec::with_capacity(prev_aug.len());
    for (k, prev) in prev_aug.iter().enumerate() {
        let cf = mu.mean(prev, a_prev, k)?;
        if let (Some(out), Some(s)) = (states.as_mut(), s_t) {
            out.push(s.iter().zip(cf.iter().zip(&factual)).map(|(s, (c, f))| s + (c - f)).collect());
        }
        rewards.push(r_prev + (cf[d] - factual[d]));
    }
    Ok((states, rewards))
}

/// Runs the sequential preprocessing over every subject.
pub fn preprocess(data: &Dataset, mu: &dyn TransitionMean, marginals: &Marginals) -> Result<PreprocessedDataset> {
    marginals.check(data.state_dim, data.attribute_count)?;
    let probs = &marginals.attribute_probs;
    let per_subject = data
        .trajectories
        .par_iter()
        .enumerate()
        .map(|(i, traj)| {
            let horizon = traj.horizon();
            let z = traj.z;
            let mut out = Vec::with_capacity(horizon);
            let mut aug = marginals.transport_initial(&traj.states[0], z);
            for t in 1..horizon {
                let (next, rewards) =
                    transport_step(mu, &aug, traj.actions[t - 1], z, Some(&traj.states[t]), traj.rewards[t - 1])?;
                let next = next.expect("state requested");
                out.push(AugmentedTuple {
                    subject_id: i,
                    t,
                    z,
                    aug_state: aug,
                    action: traj.actions[t - 1],
                    aug_reward: weighted_reward(probs, &rewards),
                    aug_next_state: Some(next.clone()),
                });
                aug = next;
            }
            let (_, rewards) = transport_step(mu, &aug, traj.actions[horizon - 1], z, None, traj.rewards[horizon - 1])?;
            out.push(AugmentedTuple {
                subject_id: i,
                t: horizon,
                z,
                aug_state: aug,
                action: traj.actions[horizon - 1],
                aug_reward: weighted_reward(probs, &rewards),
                aug_next_state: None,
            });
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreprocessedDataset {
        state_dim: data.state_dim,
        action_count: data.action_count,
        attribute_count: data.attribute_count,
        horizon: data.horizon(),
        tuples: per_subject.into_iter().flatten().collect(),
        marginals: marginals.clone(),
        mean_model: String::new(),
    })
}

/// Same as [`preprocess`] but records the mean model's descriptor.
pub fn preprocess_with(data: &Dataset, mu: &MeanModel, marginals: &Marginals) -> Result<PreprocessedDataset> {
    let mut out = preprocess(data, mu, marginals)?;
    out.mean_model = mu.descriptor();
    Ok(out)
}

/// Single-stage de-biasing: every subject's context is shifted into each
/// attribute world by the difference in conditional means. Rewards pass
/// through unchanged.
pub fn flap_single_stage(data: &Dataset, marginals: &Marginals) -> Result<PreprocessedDataset> {
    if data.horizon() != 1 {
        return arg_err(format!("single-stage preprocessing needs T = 1, got T = {}", data.horizon()));
    }
    marginals.check(data.state_dim, data.attribute_count)?;
    let tuples = data
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, traj)| AugmentedTuple {
            subject_id: i,
            t: 1,
            z: traj.z,
            aug_state: marginals.transport_initial(&traj.states[0], traj.z),
            action: traj.actions[0],
            aug_reward: traj.rewards[0],
            aug_next_state: None,
        })
        .collect();
    Ok(PreprocessedDataset {
        state_dim: data.state_dim,
        action_count: data.action_count,
        attribute_count: data.attribute_count,
        horizon: 1,
        tuples,
        marginals: marginals.clone(),
        mean_model: "none".into(),
    })
}

/// Online version of the recursion for deployment.
///
/// At the first step pass `buffer = None` and `prev_action = None`; at later
/// steps pass the previous output and the action taken. Returns the new
/// augmented state, which the caller keeps as the next buffer.
pub fn deploy_step(
    buffer: Option<&[Vec<f64>]>,
    s_t: &[f64],
    prev_action: Option<usize>,
    z: usize,
    mu: &dyn TransitionMean,
    marginals: &Marginals,
) -> Result<Vec<Vec<f64>>> {
    let k = marginals.attribute_count();
    if z >= k {
        return arg_err(format!("attribute {z} out of range for K = {k}"));
    }
    if s_t.len() != marginals.state_dim() {
        return arg_err(format!("state must have dimension {}", marginals.state_dim()));
    }
    match (buffer, prev_action) {
        (None, None) => Ok(marginals.transport_initial(s_t, z)),
        (Some(buf), Some(a)) => {
            if buf.len() != k || buf.iter().any(|row| row.len() != s_t.len()) {
                return Err(Error::Protocol(format!("buffer must hold {k} rows of dimension {}", s_t.len())));
            }
            let (next, _) = transport_step(mu, buf, a, z, Some(s_t), 0.0)?;
            Ok(next.expect("state requested"))
        }
        (None, Some(_)) => Err(Error::Protocol("previous action given without a buffer".into())),
        (Some(_), None) => Err(Error::Protocol("buffer given without the previous action".into())),
    }
}

/// Stateful wrapper around [`deploy_step`] for one subject.
pub struct DeploymentBuffer<'a> {
    mu: &'a dyn TransitionMean,
    marginals: &'a Marginals,
    z: usize,
    state: Option<Vec<Vec<f64>>>,
}

impl<'a> DeploymentBuffer<'a> {
    pub fn new(mu: &'a dyn TransitionMean, marginals: &'a Marginals, z: usize) -> Self {
        DeploymentBuffer { mu, marginals, z, state: None }
    }

    /// Feeds the newly observed state and the action taken before it.
    pub fn observe(&mut self, s_t: &[f64], prev_action: Option<usize>) -> Result<&[Vec<f64>]> {
        let next = deploy_step(self.state.as_deref(), s_t, prev_action, self.z, self.mu, self.marginals)?;
        Ok(self.state.insert(next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{linear_env, nonlinear_env, oracle_counterfactual_trajectory, sample_dataset, Trajectory};
    use proptest::prelude::*;

    fn max_oracle_gap(env: &CmdpSpec, data: &Dataset, pre: &PreprocessedDataset) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, traj) in data.trajectories.iter().enumerate() {
            let steps = pre.subject(i);
            for k in 0..data.attribute_count {
                let cf = oracle_counterfactual_trajectory(env, traj, k).unwrap();
                for (t, step) in steps.iter().enumerate() {
                    worst = worst.max((step.aug_state[k][0] - cf.states[t][0]).abs());
                }
            }
        }
        worst
    }

    #[test]
    fn exact_model_matches_oracle() {
        for env in [linear_env(1.0), linear_env(2.0), nonlinear_env(1.5)] {
            let data = sample_dataset(&env, 100, 10, 42).unwrap();
            let pre = preprocess(&data, &env, &Marginals::exact(&env)).unwrap();
            assert!(max_oracle_gap(&env, &data, &pre) < 1e-10);
        }
    }

    #[test]
    fn delta_zero_rows_collapse() {
        let env = linear_env(0.0);
        let data = sample_dataset(&env, 30, 6, 1).unwrap();
        let pre = preprocess(&data, &env, &Marginals::exact(&env)).unwrap();
        for (i, traj) in data.trajectories.iter().enumerate() {
            for (t, step) in pre.subject(i).iter().enumerate() {
                assert!(step.aug_state.iter().all(|row| row[0] == traj.states[t][0]));
            }
        }
    }

    #[test]
    fn reward_is_probability_weighted() {
        let env = linear_env(1.0);
        let data = sample_dataset(&env, 10, 4, 8).unwrap();
        let marginals = Marginals::exact(&env);
        let pre = preprocess(&data, &env, &marginals).unwrap();
        for (i, traj) in data.trajectories.iter().enumerate() {
            let worlds: Vec<Trajectory> =
                (0..2).map(|k| oracle_counterfactual_trajectory(&env, traj, k).unwrap()).collect();
            for (t, step) in pre.subject(i).iter().enumerate() {
                let expected = (worlds[0].rewards[t] + worlds[1].rewards[t]) / 2.0;
                assert!((step.aug_reward - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn next_state_chains() {
        let env = nonlinear_env(1.0);
        let data = sample_dataset(&env, 5, 7, 2).unwrap();
        let mu = fit_transition_mean(&sample_dataset(&env, 300, 7, 3).unwrap(), &MeanModelConfig::default()).unwrap();
        let pre = preprocess(&data, &mu, &Marginals::exact(&env)).unwrap();
        for i in 0..5 {
            let steps = pre.subject(i);
            for w in steps.windows(2) {
                assert_eq!(w[0].aug_next_state.as_ref(), Some(&w[1].aug_state));
            }
            assert!(steps.last().unwrap().aug_next_state.is_none());
        }
    }

    #[test]
    fn marginals_examples() {
        let traj = |z: usize, s: f64| Trajectory { z, states: vec![vec![s]], actions: vec![0], rewards: vec![0.0], noises: None };
        let data = Dataset::new(1, 2, 2, vec![traj(0, 0.0), traj(1, 2.0)]).unwrap();
        let m = estimate_marginals(&data).unwrap();
        assert_eq!(m.initial_means, vec![vec![0.0], vec![2.0]]);
        assert_eq!(m.attribute_probs, vec![0.5, 0.5]);
        let data = Dataset::new(1, 2, 2, vec![traj(0, 0.0), traj(0, 2.0)]).unwrap();
        assert!(matches!(estimate_marginals(&data), Err(Error::Coverage(_))));
    }

    #[test]
    fn missing_cell_is_a_coverage_error() {
        let env = linear_env(1.0);
        let mut data = sample_dataset(&env, 50, 5, 9).unwrap();
        for traj in &mut data.trajectories {
            if traj.z == 1 {
                traj.actions.iter_mut().for_each(|a| *a = 0);
            }
        }
        let err = fit_transition_mean(&data, &MeanModelConfig::default()).unwrap_err();
        match err {
            Error::Coverage(msg) => assert!(msg.contains("a = 1, z = 1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flap_examples() {
        let env = linear_env(1.0);
        let data = sample_dataset(&env, 200, 1, 4).unwrap();
        let marginals = Marginals::exact(&env);
        let flap = flap_single_stage(&data, &marginals).unwrap();
        let seq = preprocess(&data, &env, &marginals).unwrap();
        for ((f, s), traj) in flap.tuples.iter().zip(&seq.tuples).zip(&data.trajectories) {
            assert_eq!(f.aug_state, s.aug_state);
            assert_eq!(f.aug_reward, traj.rewards[0]);
            assert_eq!(f.aug_state[traj.z], traj.states[0]);
            assert!((f.aug_state[1][0] - f.aug_state[0][0] - 1.0).abs() < 1e-12);
        }
        let long = sample_dataset(&env, 5, 2, 4).unwrap();
        assert!(matches!(flap_single_stage(&long, &marginals), Err(Error::Argument(_))));
    }

    #[test]
    fn deployment_replays_preprocessing() {
        let env = linear_env(1.0);
        let data = sample_dataset(&env, 20, 8, 6).unwrap();
        let mu = fit_transition_mean(&sample_dataset(&env, 400, 8, 7).unwrap(), &MeanModelConfig::default()).unwrap();
        let marginals = estimate_marginals(&data).unwrap();
        let pre = preprocess(&data, &mu, &marginals).unwrap();
        for (i, traj) in data.trajectories.iter().enumerate() {
            let mut buffer = DeploymentBuffer::new(&mu, &marginals, traj.z);
            for t in 0..traj.horizon() {
                let prev = (t > 0).then(|| traj.actions[t - 1]);
                let aug = buffer.observe(&traj.states[t], prev).unwrap();
                assert_eq!(aug, pre.subject(i)[t].aug_state.as_slice());
                if t == 0 {
                    assert_eq!(aug[traj.z], traj.states[0]);
                }
            }
        }
    }

    #[test]
    fn deployment_with_exact_model_matches_oracle() {
        let env = nonlinear_env(1.0);
        let data = sample_dataset(&env, 20, 8, 6).unwrap();
        let marginals = Marginals::exact(&env);
        for traj in &data.trajectories {
            let worlds: Vec<Trajectory> =
                (0..2).map(|k| oracle_counterfactual_trajectory(&env, traj, k).unwrap()).collect();
            let mut buf: Option<Vec<Vec<f64>>> = None;
            for t in 0..traj.horizon() {
                let prev = (t > 0).then(|| traj.actions[t - 1]);
                let next = deploy_step(buf.as_deref(), &traj.states[t], prev, traj.z, &env, &marginals).unwrap();
                for k in 0..2 {
                    assert!((next[k][0] - worlds[k].states[t][0]).abs() < 1e-10);
                }
                buf = Some(next);
            }
        }
    }

    #[test]
    fn deployment_protocol_errors() {
        let env = linear_env(1.0);
        let m = Marginals::exact(&env);
        let buf = vec![vec![0.0], vec![1.0]];
        assert!(matches!(deploy_step(None, &[0.0], Some(1), 0, &env, &m), Err(Error::Protocol(_))));
        assert!(matches!(deploy_step(Some(&buf), &[0.0], None, 0, &env, &m), Err(Error::Protocol(_))));
        assert!(matches!(deploy_step(Some(&buf[..1]), &[0.0], Some(0), 0, &env, &m), Err(Error::Protocol(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn factual_row_is_observed(seed in any::<u64>(), delta in 0.0f64..2.0) {
            let env = nonlinear_env(delta);
            let train = sample_dataset(&env, 200, 5, seed).unwrap();
            let mu = fit_transition_mean(&train, &MeanModelConfig::default()).unwrap();
            let marginals = estimate_marginals(&train).unwrap();
            let data = sample_dataset(&env, 10, 5, seed.wrapping_add(1)).unwrap();
            let pre = preprocess(&data, &mu, &marginals).unwrap();
            for (i, traj) in data.trajectories.iter().enumerate() {
                for (t, step) in pre.subject(i).iter().enumerate() {
                    prop_assert_eq!(&step.aug_state[traj.z], &traj.states[t]);
                }
            }
        }

        #[test]
        fn worlds_agree_under_exact_model(seed in any::<u64>(), delta in 0.0f64..2.0) {
            let env = linear_env(delta);
            let marginals = Marginals::exact(&env);
            let data = sample_dataset(&env, 6, 8, seed).unwrap();
            for traj in &data.trajectories {
                let other = oracle_counterfactual_trajectory(&env, traj, 1 - traj.z).unwrap();
                let both = Dataset::new(1, 2, 2, vec![traj.clone(), other]).unwrap();
                let pre = preprocess(&both, &env, &marginals).unwrap();
                for (a, b) in pre.subject(0).iter().zip(pre.subject(1)) {
                    for k in 0..2 {
                        prop_assert!((a.aug_state[k][0] - b.aug_state[k][0]).abs() < 1e-10);
                    }
                }
            }
        }
    }
}
