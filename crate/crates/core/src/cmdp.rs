//! Contextual MDPs with a static sensitive attribute.
//!
//! An environment is a structural causal model with additive exogenous
//! noise: `s_1 = m(z) + U^S_1` and `(s_{t+1}, r_t) = mu(s_t, a_t, z) +
//! (U^S_{t+1}, U^R_t)`. Simulated trajectories keep the realized noises,
//! which makes ground-truth counterfactuals available by replay.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::rng::{self, tag};

/// Logistic function.
pub fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generative model of a contextual MDP.
///
/// Implementations must be pure functions of their arguments; sampling and
/// counterfactual replay both call through this trait and rely on it being
/// deterministic to reproduce stored trajectories bit for bit.
pub trait Cmdp: Send + Sync {
    /// `P(Z = z)` for every attribute value, indexed by `z`.
    fn attribute_probs(&self) -> &[f64];
    fn state_dim(&self) -> usize;
    fn action_count(&self) -> usize;
    /// `E[S_1 | Z = z]`.
    fn initial_mean(&self, z: usize) -> Vec<f64>;
    /// Next-state mean followed by the reward mean (length `state_dim + 1`).
    fn joint_mean(&self, s: &[f64], a: usize, z: usize) -> Vec<f64>;
    /// Logging policy used to collect offline data.
    fn behavior_probs(&self, s: &[f64], z: usize) -> Vec<f64>;

    /// Draws one row `(U^S, U^R)` of mean-zero exogenous noise.
    fn sample_noise(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        let d = self.state_dim();
        for u in out[..d].iter_mut() {
            *u = StandardNormal.sample(rng);
        }
        out[d] = 0.0;
    }

    fn attribute_count(&self) -> usize {
        self.attribute_probs().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Linear,
    Nonlinear,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(EnvKind::Linear),
            "nonlinear" => Ok(EnvKind::Nonlinear),
            other => arg_err(format!("unknown environment `{other}`")),
        }
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvKind::Linear => "linear",
            EnvKind::Nonlinear => "nonlinear",
        })
    }
}

const BINARY_ATTRIBUTE: [f64; 2] = [0.5, 0.5];

/// One of the two built-in synthetic environments: scalar state, binary
/// action, binary attribute, standard normal state noise.
///
/// `delta` scales the influence of the attribute. `reward_noise_sd` is zero
/// for the reference generators (their rewards are deterministic given
/// state, action and attribute) and exists as a hook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmdpSpec {
    pub kind: EnvKind,
    pub delta: f64,
    #[serde(default)]
    pub reward_noise_sd: f64,
}

pub fn linear_env(delta: f64) -> CmdpSpec {
    CmdpSpec { kind: EnvKind::Linear, delta, reward_noise_sd: 0.0 }
}

pub fn nonlinear_env(delta: f64) -> CmdpSpec {
    CmdpSpec { kind: EnvKind::Nonlinear, delta, reward_noise_sd: 0.0 }
}

impl CmdpSpec {
    pub fn new(kind: EnvKind, delta: f64) -> Self {
        CmdpSpec { kind, delta, reward_noise_sd: 0.0 }
    }

    pub fn with_reward_noise(mut self, sd: f64) -> Self {
        self.reward_noise_sd = sd;
        self
    }
}

impl Cmdp for CmdpSpec {
    fn attribute_probs(&self) -> &[f64] {
        &BINARY_ATTRIBUTE
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn action_count(&self) -> usize {
        2
    }

    fn initial_mean(&self, z: usize) -> Vec<f64> {
        let z = z as f64;
        match self.kind {
            // S_1 uses delta*Z while later states use delta*(Z - 0.5); both kept as generated.
            EnvKind::Linear => vec![-0.3 + 1.0 * self.delta * z],
            // No delta in the nonlinear initial state.
            EnvKind::Nonlinear => vec![-0.7 + 0.8 * z],
        }
    }

    fn joint_mean(&self, s: &[f64], a: usize, z: usize) -> Vec<f64> {
        let d = self.delta;
        let s = s[0];
        let (a, z) = (a as f64, z as f64);
        let ac = a - 0.5;
        match self.kind {
            EnvKind::Linear => {
                let zc = z - 0.5;
                let next = -0.3 + 1.0 * d * zc + 0.5 * s + 0.4 * ac + 0.3 * s * ac
                    + 0.3 * d * s * zc
                    + 0.4 * d * zc * ac;
                let reward = -0.3 + 0.3 * s + 0.5 * d * z + 0.5 * a + 0.2 * d * s * z
                    + 0.7 * s * a
                    - 1.0 * d * z * a;
                vec![next, reward]
            }
            EnvKind::Nonlinear => {
                let g = s.sin() + s.cos();
                let next = -1.0 + 0.8 * d * z + 0.25 * g + 0.4 * ac + 0.15 * g * ac
                    + 0.15 * d * g * z
                    + 0.4 * d * z * ac;
                let reward = -0.2 + 0.3 * s + 0.8 * d * z + 0.8 * a - 0.6 * d * s * z
                    - 0.7 * s * a
                    - 1.6 * d * z * a;
                vec![next, reward]
            }
        }
    }

    fn behavior_probs(&self, _s: &[f64], z: usize) -> Vec<f64> {
        let p = expit(-1.39 + 2.77 * z as f64);
        vec![1.0 - p, p]
    }

    fn sample_noise(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        out[0] = StandardNormal.sample(rng);
        out[1] = if self.reward_noise_sd > 0.0 {
            let u: f64 = StandardNormal.sample(rng);
            self.reward_noise_sd * u
        } else {
            0.0
        };
    }
}

/// One subject's observed sequence `(z, s_t, a_t, r_t)`, t = 1..T.
///
/// `noises[t]` is the realized `(U^S_t, U^R_t)` row; it is only present for
/// simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub z: usize,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noises: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    fn validate(&self, state_dim: usize, action_count: usize, k: usize) -> Result<()> {
        let t = self.states.len();
        if t == 0 {
            return arg_err("trajectory has no steps");
        }
        if self.actions.len() != t || self.rewards.len() != t {
            return arg_err(format!(
                "trajectory lengths disagree: {} states, {} actions, {} rewards",
                t,
                self.actions.len(),
                self.rewards.len()
            ));
        }
        if self.z >= k {
            return arg_err(format!("attribute {} out of range for K = {k}", self.z));
        }
        if let Some(a) = self.actions.iter().find(|&&a| a >= action_count) {
            return arg_err(format!("action {a} out of range for {action_count} actions"));
        }
        if self.states.iter().any(|s| s.len() != state_dim) {
            return arg_err(format!("state rows must have dimension {state_dim}"));
        }
        if let Some(noises) = &self.noises {
            if noises.len() != t || noises.iter().any(|u| u.len() != state_dim + 1) {
                return arg_err("noise record must be T rows of state_dim + 1 values");
            }
        }
        Ok(())
    }
}

/// A batch of trajectories sharing dimensions and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub state_dim: usize,
    pub action_count: usize,
    pub attribute_count: usize,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(
        state_dim: usize,
        action_count: usize,
        attribute_count: usize,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        if trajectories.is_empty() {
            return arg_err("dataset needs at least one trajectory");
        }
        if state_dim == 0 || action_count == 0 || attribute_count < 2 {
            return arg_err("need state_dim >= 1, action_count >= 1, K >= 2");
        }
        let horizon = trajectories[0].horizon();
        for (i, traj) in trajectories.iter().enumerate() {
            traj.validate(state_dim, action_count, attribute_count)
                .map_err(|e| Error::Argument(format!("subject {i}: {e}")))?;
            if traj.horizon() != horizon {
                return arg_err(format!(
                    "subject {i} has horizon {}, expected {horizon}",
                    traj.horizon()
                ));
            }
        }
        Ok(Dataset { state_dim, action_count, attribute_count, trajectories })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.trajectories[0].horizon()
    }

    pub fn has_noises(&self) -> bool {
        self.trajectories.iter().all(|t| t.noises.is_some())
    }

    pub fn without_noises(&self) -> Dataset {
        let mut out = self.clone();
        for t in &mut out.trajectories {
            t.noises = None;
        }
        out
    }
}

/// `s_1 = E[S_1 | z] + U^S_1`.
pub(crate) fn initial_state(env: &dyn Cmdp, z: usize, noise: &[f64]) -> Vec<f64> {
    let mut s = env.initial_mean(z);
    for (x, u) in s.iter_mut().zip(noise) {
        *x += u;
    }
    s
}

/// Applies one transition. Returns the reward and, when `next_noise` is
/// given, the next state.
pub(crate) fn transition(
    env: &dyn Cmdp,
    s: &[f64],
    a: usize,
    z: usize,
    noise: &[f64],
    next_noise: Option<&[f64]>,
) -> (f64, Option<Vec<f64>>) {
    let d = s.len();
    let mean = env.joint_mean(s, a, z);
    let reward = mean[d] + noise[d];
    let next = next_noise.map(|u| mean[..d].iter().zip(u).map(|(m, u)| m + u).collect());
    (reward, next)
}

/// Draws an index from `probs` by inverting the CDF at `u ∈ [0, 1)`.
pub fn draw_from(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub(crate) fn draw_noises(env: &dyn Cmdp, rng: &mut dyn RngCore, horizon: usize) -> Vec<Vec<f64>> {
    let width = env.state_dim() + 1;
    (0..horizon)
        .map(|_| {
            let mut row = vec![0.0; width];
            env.sample_noise(rng, &mut row);
            row
        })
        .collect()
}

/// Rolls out one subject with a caller-supplied action rule. `choose`
/// receives `(t, s_t)` with `t` zero-based.
pub(crate) fn rollout_with(
    env: &dyn Cmdp,
    z: usize,
    noises: Vec<Vec<f64>>,
    mut choose: impl FnMut(usize, &[f64]) -> Result<usize>,
) -> Result<Trajectory> {
    let horizon = noises.len();
    let mut states = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut s = initial_state(env, z, &noises[0]);
    for t in 0..horizon {
        let a = choose(t, &s)?;
        let (r, next) = transition(env, &s, a, z, &noises[t], noises.get(t + 1).map(Vec::as_slice));
        states.push(s);
        actions.push(a);
        rewards.push(r);
        match next {
            Some(n) => s = n,
            None => break,
        }
    }
    Ok(Trajectory { z, states, actions, rewards, noises: Some(noises) })
}

/// Replays a fixed action sequence under attribute `z` with the given noises.
pub(crate) fn replay(env: &dyn Cmdp, z: usize, noises: &[Vec<f64>], actions: &[usize]) -> Trajectory {
    rollout_with(env, z, noises.to_vec(), |t, _| Ok(actions[t]))
        .expect("replay with a fixed action sequence cannot fail")
}

/// Samples `n` trajectories of length `horizon` under the behavior policy.
///
/// Trajectory `i` uses its own stream keyed by `(seed, i)`, so the result
/// does not depend on thread count.
pub fn sample_dataset(env: &dyn Cmdp, n: usize, horizon: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return arg_err("n must be at least 1");
    }
    if horizon == 0 {
        return arg_err("horizon must be at least 1");
    }
    let probs = env.attribute_probs();
    let trajectories = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(&[seed, tag::TRAJECTORY, i as u64]);
            let z = draw_from(probs, rng.random::<f64>());
            let noises = draw_noises(env, &mut rng, horizon);
            rollout_with(env, z, noises, |_, s| {
                let p = env.behavior_probs(s, z);
                Ok(draw_from(&p, rng.random::<f64>()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(env.state_dim(), env.action_count(), env.attribute_count(), trajectories)
}

/// Ground-truth counterfactual of `traj` had the attribute been `target_z`:
/// same noises, same observed actions, attribute set to `target_z`.
pub fn oracle_counterfactual_trajectory(
    env: &dyn Cmdp,
    traj: &Trajectory,
    target_z: usize,
) -> Result<Trajectory> {
    let noises = traj.noises.as_ref().ok_or_else(|| {
        Error::Unsupported("counterfactual abduction needs the simulator's noise record".into())
    })?;
    if target_z >= env.attribute_count() {
        return arg_err(format!(
            "target attribute {target_z} out of range for K = {}",
            env.attribute_count()
        ));
    }
    Ok(replay(env, target_z, noises, &traj.actions))
}
