//! Fitted Q iteration, greedy policies and the comparison baselines.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cmdp::{oracle_counterfactual_trajectory, Cmdp, CmdpSpec, Dataset};
use crate::error::{arg_err, Error, Result};
use crate::preprocess::{Marginals, MeanModel, PreprocessedDataset};
use crate::regression::{
    design_matrix, model_from_weights, Basis, FeatureMap, LeastSquares, LinearModel, MlpModel, Targets,
    DEFAULT_RIDGE,
};
use crate::rng;

/// What a state vector contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Representation {
    /// The observed state only.
    Raw { state_dim: usize },
    /// The observed state followed by a one-hot attribute.
    RawWithAttribute { state_dim: usize, attribute_count: usize },
    /// Counterfactual states for every attribute value, world-major.
    Augmented { state_dim: usize, attribute_count: usize },
}

impl Representation {
    pub fn dim(&self) -> usize {
        match *self {
            Representation::Raw { state_dim } => state_dim,
            Representation::RawWithAttribute { state_dim, attribute_count } => state_dim + attribute_count,
            Representation::Augmented { state_dim, attribute_count } => state_dim * attribute_count,
        }
    }

    pub fn is_augmented(&self) -> bool {
        matches!(self, Representation::Augmented { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Representation::Raw { .. } => "raw",
            Representation::RawWithAttribute { .. } => "raw+attribute",
            Representation::Augmented { .. } => "augmented",
        }
    }

    fn feature_map(&self, basis: &Basis, action_count: usize) -> FeatureMap {
        match *self {
            Representation::Raw { state_dim } => FeatureMap::new(basis.clone(), state_dim, action_count),
            Representation::RawWithAttribute { state_dim, attribute_count } => {
                FeatureMap::new(basis.clone(), state_dim, action_count).grouped_by_attribute(attribute_count)
            }
            Representation::Augmented { state_dim, attribute_count } => {
                FeatureMap::new(basis.clone(), state_dim * attribute_count, action_count)
            }
        }
    }
}

pub(crate) fn with_attribute(s: &[f64], z: usize, k: usize) -> Vec<f64> {
    let mut v = s.to_vec();
    v.extend((0..k).map(|i| if i == z { 1.0 } else { 0.0 }));
    v
}

/// `(s, a, r, s')`. A missing `s_next` marks a step whose successor was not
/// observed; its target is the reward alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceTuple {
    pub s: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub s_next: Option<Vec<f64>>,
    /// One-based time index of `s`.
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceSet {
    pub representation: Representation,
    pub action_count: usize,
    pub tuples: Vec<ExperienceTuple>,
}

impl ExperienceSet {
    pub fn new(representation: Representation, action_count: usize, tuples: Vec<ExperienceTuple>) -> Result<Self> {
        if tuples.is_empty() {
            return arg_err("no experience tuples");
        }
        let dim = representation.dim();
        for (i, tup) in tuples.iter().enumerate() {
            if tup.s.len() != dim || tup.s_next.as_ref().is_some_and(|n| n.len() != dim) {
                return arg_err(format!("tuple {i}: states must have dimension {dim} ({})", representation.name()));
            }
            if tup.a >= action_count {
                return arg_err(format!("tuple {i}: action {} out of range", tup.a));
            }
        }
        Ok(ExperienceSet { representation, action_count, tuples })
    }

    /// States at `t = 1`, used as the initial-state distribution.
    pub fn initial_states(&self) -> impl Iterator<Item = &[f64]> {
        self.tuples.iter().filter(|t| t.t == 1).map(|t| t.s.as_slice())
    }
}

/// Observed-state tuples with raw rewards, optionally with the attribute appended.
pub fn raw_tuples(data: &Dataset, include_attribute: bool, include_final: bool) -> Result<ExperienceSet> {
    let (d, k) = (data.state_dim, data.attribute_count);
    let encode = |s: &[f64], z| if include_attribute { with_attribute(s, z, k) } else { s.to_vec() };
    let mut tuples = Vec::new();
    for traj in &data.trajectories {
        let horizon = traj.horizon();
        for t in 0..horizon {
            if t + 1 == horizon && !include_final {
                break;
            }
            tuples.push(ExperienceTuple {
                s: encode(&traj.states[t], traj.z),
                a: traj.actions[t],
                r: traj.rewards[t],
                s_next: traj.states.get(t + 1).map(|n| encode(n, traj.z)),
                t: t + 1,
            });
        }
    }
    let representation = if include_attribute {
        Representation::RawWithAttribute { state_dim: d, attribute_count: k }
    } else {
        Representation::Raw { state_dim: d }
    };
    ExperienceSet::new(representation, data.action_count, tuples)
}

/// Tuples on estimated augmented states with preprocessed rewards.
pub fn augmented_tuples(pre: &PreprocessedDataset, include_final: bool) -> Result<ExperienceSet> {
    let tuples = pre
        .tuples
        .iter()
        .filter(|t| include_final || t.aug_next_state.is_some())
        .map(|t| ExperienceTuple {
            s: t.flat_state(),
            a: t.action,
            r: t.aug_reward,
            s_next: t.aug_next_state.as_ref().map(|n| n.concat()),
            t: t.t,
        })
        .collect();
    let representation = Representation::Augmented { state_dim: pre.state_dim, attribute_count: pre.attribute_count };
    ExperienceSet::new(representation, pre.action_count, tuples)
}

/// Tuples on the true counterfactual states, rewards weighted by the true `P(Z)`.
pub fn oracle_tuples(data: &Dataset, env: &dyn Cmdp, include_final: bool) -> Result<ExperienceSet> {
    let k = data.attribute_count;
    let probs = env.attribute_probs();
    let mut tuples = Vec::new();
    for traj in &data.trajectories {
        let worlds = (0..k)
            .map(|z| oracle_counterfactual_trajectory(env, traj, z))
            .collect::<Result<Vec<_>>>()?;
        let aug = |t: usize| -> Vec<f64> { worlds.iter().flat_map(|w| w.states[t].iter().copied()).collect() };
        let horizon = traj.horizon();
        for t in 0..horizon {
            if t + 1 == horizon && !include_final {
                break;
            }
            tuples.push(ExperienceTuple {
                s: aug(t),
                a: traj.actions[t],
                r: worlds.iter().zip(probs).map(|(w, p)| p * w.rewards[t]).sum(),
                s_next: (t + 1 < horizon).then(|| aug(t + 1)),
                t: t + 1,
            });
        }
    }
    let representation = Representation::Augmented { state_dim: data.state_dim, attribute_count: k };
    ExperienceSet::new(representation, data.action_count, tuples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum QRegressor {
    /// Least squares over `basis`, one block per action (and per attribute
    /// for attribute-bearing inputs).
    Linear { basis: Basis, ridge: f64 },
    /// Network `s -> Q(s, ·)`, warm-started across iterations.
    Mlp { hidden: Vec<usize>, steps_per_iteration: usize, learning_rate: f64, batch_size: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FqiConfig {
    pub gamma: f64,
    pub iterations: usize,
    pub regressor: QRegressor,
    pub seed: u64,
    /// Also train on each trajectory's last step, with target `r` alone.
    #[serde(default)]
    pub include_final_step: bool,
}

impl Default for FqiConfig {
    fn default() -> Self {
        FqiConfig {
            gamma: 0.9,
            iterations: 100,
            regressor: QRegressor::Linear { basis: Basis::Quadratic, ridge: DEFAULT_RIDGE },
            seed: 0,
            include_final_step: false,
        }
    }
}

impl FqiConfig {
    /// Network recipe of the reference experiments: hidden [32], 500 Adam
    /// steps per iteration at learning rate 0.1.
    pub fn reference_mlp(seed: u64) -> Self {
        FqiConfig {
            regressor: QRegressor::Mlp { hidden: vec![32], steps_per_iteration: 500, learning_rate: 0.1, batch_size: None },
            seed,
            ..FqiConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return arg_err(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if self.iterations == 0 {
            return arg_err("need at least one iteration");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum QModel {
    Linear(LinearModel),
    Mlp(MlpModel),
}

/// Action-value function over one state representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFunction {
    pub model: QModel,
    pub gamma: f64,
    pub representation: Representation,
    pub action_count: usize,
}

impl QFunction {
    pub fn values(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.representation.dim() {
            return arg_err(format!(
                "Q function expects a {} state of dimension {}, got {}",
                self.representation.name(),
                self.representation.dim(),
                s.len()
            ));
        }
        match &self.model {
            QModel::Linear(m) => (0..self.action_count).map(|a| Ok(m.predict(s, a)?[0])).collect(),
            QModel::Mlp(m) => m.forward(s),
        }
    }

    pub fn value(&self, s: &[f64], a: usize) -> Result<f64> {
        if a >= self.action_count {
            return arg_err(format!("action {a} out of range"));
        }
        Ok(self.values(s)?[a])
    }
}

/// Greedy action with ties broken towards the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Result of [`fqi_traced`]: the final Q function and, per iteration, the
/// sup-norm change of the fitted values over the training pairs.
pub struct FqiTrace {
    pub q: QFunction,
    pub iterate_gaps: Vec<f64>,
}

/// Bellman targets `r + gamma * next_value` with `next_value` supplied per tuple.
pub(crate) fn targets_with(set: &ExperienceSet, gamma: f64, next_value: impl Fn(usize) -> f64) -> Vec<f64> {
    set.tuples
        .iter()
        .enumerate()
        .map(|(i, t)| if t.s_next.is_some() { t.r + gamma * next_value(i) } else { t.r })
        .collect()
}

/// Linear-model machinery shared by FQI and FQE: the design on `(s, a)` is
/// fixed, so it is factorized once.
pub(crate) struct LinearBackup {
    pub fm: FeatureMap,
    solver: LeastSquares,
    /// `next_designs[b]` holds `phi(s', b)` (zero rows where `s'` is absent).
    next_designs: Vec<DMatrix<f64>>,
}

impl LinearBackup {
    pub fn new(set: &ExperienceSet, basis: &Basis, ridge: f64) -> Result<Self> {
        let fm = set.representation.feature_map(basis, set.action_count);
        let states: Vec<Vec<f64>> = set.tuples.iter().map(|t| t.s.clone()).collect();
        let actions: Vec<usize> = set.tuples.iter().map(|t| t.a).collect();
        let solver = LeastSquares::new_auto(design_matrix(&fm, &states, &actions)?, ridge)?;
        let n = set.tuples.len();
        let mut next_designs = vec![DMatrix::zeros(n, fm.dimension()); set.action_count];
        let mut row = vec![0.0; fm.dimension()];
        for (i, t) in set.tuples.iter().enumerate() {
            if let Some(sn) = &t.s_next {
                for (b, design) in next_designs.iter_mut().enumerate() {
                    fm.write(sn, b, &mut row);
                    for (j, v) in row.iter().enumerate() {
                        design[(i, j)] = *v;
                    }
                }
            }
        }
        Ok(LinearBackup { fm, solver, next_designs })
    }

    /// `Q(s'_i, b)` for every tuple and action, as `action_count` column vectors.
    pub fn next_values(&self, w: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        self.next_designs.iter().map(|d| d * w).collect()
    }

    pub fn fitted(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        self.solver.design() * w
    }

    pub fn solve(&self, y: &[f64]) -> DMatrix<f64> {
        self.solver.solve(&DMatrix::from_column_slice(y.len(), 1, y))
    }

    pub fn ridge(&self) -> f64 {
        self.solver.ridge()
    }
}

pub fn fqi_traced(set: &ExperienceSet, config: &FqiConfig) -> Result<FqiTrace> {
    config.validate()?;
    let gamma = config.gamma;
    let n = set.tuples.len();
    match &config.regressor {
        QRegressor::Linear { basis, ridge } => {
            let backup = LinearBackup::new(set, basis, *ridge)?;
            let mut w = DMatrix::zeros(backup.fm.dimension(), 1);
            let mut fitted = DMatrix::zeros(n, 1);
            let mut gaps = Vec::with_capacity(config.iterations);
            for b in 0..config.iterations {
                let next = backup.next_values(&w);
                let y = targets_with(set, gamma, |i| next.iter().map(|col| col[i]).fold(f64::NEG_INFINITY, f64::max));
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Iteration {
                        iteration: b + 1,
                        source: Box::new(Error::Divergence { epoch: b + 1, loss: f64::NAN }),
                    });
                }
                w = backup.solve(&y);
                let new_fitted = backup.fitted(&w);
                gaps.push((&new_fitted - &fitted).amax());
                fitted = new_fitted;
            }
            let model = model_from_weights(&backup.fm, &w, backup.ridge());
            Ok(FqiTrace {
                q: QFunction { model: QModel::Linear(model), gamma, representation: set.representation, action_count: set.action_count },
                iterate_gaps: gaps,
            })
        }
        QRegressor::Mlp { hidden, steps_per_iteration, learning_rate, batch_size } => {
            let mut sizes = vec![set.representation.dim()];
            sizes.extend_from_slice(hidden);
            sizes.push(set.action_count);
            let mut model = MlpModel::new(&sizes, config.seed)?;
            let inputs: Vec<Vec<f64>> = set.tuples.iter().map(|t| t.s.clone()).collect();
            let heads: Vec<usize> = set.tuples.iter().map(|t| t.a).collect();
            let mut batch_rng = rng::stream(&[config.seed, rng::tag::BATCH]);
            let mut fitted: Vec<f64> = vec![0.0; n];
            let mut gaps = Vec::with_capacity(config.iterations);
            for b in 0..config.iterations {
                let next: Vec<f64> = set
                    .tuples
                    .iter()
                    .map(|t| match &t.s_next {
                        Some(sn) => model.forward(sn).map(|q| q.into_iter().fold(f64::NEG_INFINITY, f64::max)),
                        None => Ok(0.0),
                    })
                    .collect::<Result<_>>()?;
                let y = targets_with(set, gamma, |i| next[i]);
                model
                    .train_steps(&inputs, Targets::Selected { heads: &heads, values: &y }, *steps_per_iteration, *learning_rate, *batch_size, &mut batch_rng)
                    .map_err(|e| Error::Iteration { iteration: b + 1, source: Box::new(e) })?;
                let new_fitted: Vec<f64> = inputs
                    .iter()
                    .zip(&heads)
                    .map(|(x, &a)| model.forward(x).map(|q| q[a]))
                    .collect::<Result<_>>()?;
                gaps.push(new_fitted.iter().zip(&fitted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
                fitted = new_fitted;
            }
            Ok(FqiTrace {
                q: QFunction { model: QModel::Mlp(model), gamma, representation: set.representation, action_count: set.action_count },
                iterate_gaps: gaps,
            })
        }
    }
}

/// Fitted Q iteration: `f_0` is zero for the linear model (seeded random for
/// the network), then `f_b = argmin_f Σ (f(s_i, a_i) - r_i - γ max_a f_{b-1}(s'_i, a))²`.
pub fn fqi(set: &ExperienceSet, config: &FqiConfig) -> Result<QFunction> {
    Ok(fqi_traced(set, config)?.q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    #[default]
    LowestIndex,
}

/// How an augmented policy obtains its counterfactual states online.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Augmentation {
    /// Recomputed step by step from observations with a fitted mean model.
    Estimated { mean_model: MeanModel, marginals: Marginals },
    /// Read off the simulator's ground-truth counterfactuals.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PolicyKind {
    Greedy { q: QFunction },
    Random { action_count: usize },
    Behavior { env: CmdpSpec },
    /// Deterministic action per attribute value.
    FixedMap { actions: Vec<usize> },
}

/// A stationary decision rule over one input representation. It carries no
/// time index: equal inputs always give equal action distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub method: Option<Method>,
    pub kind: PolicyKind,
    pub contract: Representation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<Augmentation>,
    #[serde(default)]
    pub tie_rule: TieRule,
}

fn attribute_of(input: &[f64], state_dim: usize) -> usize {
    argmax_lowest(&input[state_dim..])
}

impl Policy {
    pub fn random(action_count: usize, state_dim: usize) -> Self {
        Policy {
            method: Some(Method::Random),
            kind: PolicyKind::Random { action_count },
            contract: Representation::Raw { state_dim },
            augmentation: None,
            tie_rule: TieRule::LowestIndex,
        }
    }

    pub fn behavior(env: &CmdpSpec) -> Self {
        Policy {
            method: Some(Method::Behavior),
            kind: PolicyKind::Behavior { env: env.clone() },
            contract: Representation::RawWithAttribute { state_dim: env.state_dim(), attribute_count: env.attribute_count() },
            augmentation: None,
            tie_rule: TieRule::LowestIndex,
        }
    }

    pub fn fixed_map(actions: Vec<usize>, state_dim: usize) -> Self {
        let attribute_count = actions.len();
        Policy {
            method: None,
            kind: PolicyKind::FixedMap { actions },
            contract: Representation::RawWithAttribute { state_dim, attribute_count },
            augmentation: None,
            tie_rule: TieRule::LowestIndex,
        }
    }

    pub fn action_count(&self) -> usize {
        match &self.kind {
            PolicyKind::Greedy { q } => q.action_count,
            PolicyKind::Random { action_count } => *action_count,
            PolicyKind::Behavior { env } => env.action_count(),
            PolicyKind::FixedMap { actions } => actions.iter().copied().max().map_or(1, |m| m + 1),
        }
    }

    /// Action distribution at `input`, which must match the input contract.
    pub fn action_probs(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.contract.dim() {
            return arg_err(format!(
                "policy consumes a {} state of dimension {}, got dimension {}",
                self.contract.name(),
                self.contract.dim(),
                input.len()
            ));
        }
        let one_hot = |a: usize, n: usize| (0..n).map(|i| if i == a { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        match &self.kind {
            PolicyKind::Greedy { q } => Ok(one_hot(argmax_lowest(&q.values(input)?), q.action_count)),
            PolicyKind::Random { action_count } => Ok(vec![1.0 / *action_count as f64; *action_count]),
            PolicyKind::Behavior { env } => {
                let d = env.state_dim();
                Ok(env.behavior_probs(&input[..d], attribute_of(input, d)))
            }
            PolicyKind::FixedMap { actions } => {
                let d = self.contract.dim() - actions.len();
                Ok(one_hot(actions[attribute_of(input, d)], self.action_count()))
            }
        }
    }
}

/// Deterministic argmax policy of `q`.
pub fn greedy_policy(q: QFunction) -> Policy {
    Policy { method: None, contract: q.representation, kind: PolicyKind::Greedy { q }, augmentation: None, tie_rule: TieRule::LowestIndex }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ours,
    Full,
    Unaware,
    Oracle,
    Random,
    Behavior,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Ours, Method::Full, Method::Unaware, Method::Oracle, Method::Random, Method::Behavior];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Full => "full",
            Method::Unaware => "unaware",
            Method::Oracle => "oracle",
            Method::Random => "random",
            Method::Behavior => "behavior",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Prerequisites for [`train_baseline`]; which ones are needed depends on the method.
#[derive(Default, Clone, Copy)]
pub struct TrainInputs<'a> {
    /// Simulator (oracle, behavior).
    pub env: Option<&'a CmdpSpec>,
    /// Output of the preprocessing step (ours).
    pub preprocessed: Option<&'a PreprocessedDataset>,
    /// Mean model used for that preprocessing, kept for deployment (ours).
    pub mean_model: Option<&'a MeanModel>,
}

/// Builds the method's representation, runs FQI where applicable and
/// returns the greedy policy tagged with its input contract.
///
/// Full and unaware train on raw rewards; ours and oracle on the
/// probability-weighted counterfactual rewards.
pub fn train_baseline(method: Method, data: &Dataset, inputs: TrainInputs<'_>, config: &FqiConfig) -> Result<Policy> {
    let need_env = || inputs.env.ok_or_else(|| Error::Argument(format!("{method} needs the simulator")));
    let include_final = config.include_final_step;
    let (set, augmentation) = match method {
        Method::Random => return Ok(Policy::random(data.action_count, data.state_dim)),
        Method::Behavior => return Ok(Policy::behavior(need_env()?)),
        Method::Full => (raw_tuples(data, true, include_final)?, None),
        Method::Unaware => (raw_tuples(data, false, include_final)?, None),
        Method::Oracle => {
            let env = need_env()?;
            if !data.has_noises() {
                return Err(Error::Argument("oracle needs trajectories with noise records".into()));
            }
            (oracle_tuples(data, env, include_final)?, Some(Augmentation::Oracle))
        }
        Method::Ours => {
            let pre = inputs
                .preprocessed
                .ok_or_else(|| Error::Argument("ours needs a preprocessed dataset".into()))?;
            let mean_model = inputs
                .mean_model
                .ok_or_else(|| Error::Argument("ours needs the mean model used for preprocessing".into()))?;
            (
                augmented_tuples(pre, include_final)?,
                Some(Augmentation::Estimated { mean_model: mean_model.clone(), marginals: pre.marginals.clone() }),
            )
        }
    };
    let mut policy = greedy_policy(fqi(&set, config)?);
    policy.method = Some(method);
    policy.augmentation = augmentation;
    Ok(policy)
}
