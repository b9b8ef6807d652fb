//! Counterfactually fair offline reinforcement learning.
//!
//! The pipeline: simulate (or load) offline trajectories from a contextual
//! MDP with a sensitive attribute ([`cmdp`]), transport every observed state
//! and reward into each counterfactual attribute world ([`preprocess`]),
//! learn a stationary policy on the augmented states with fitted Q
//! iteration ([`policy`]), and measure value and counterfactual unfairness
//! ([`evaluation`]). [`experiment`] and [`plot`] run the comparison sweeps.

#![allow(clippy::needless_range_loop)]

pub mod cmdp;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod io;
pub mod plot;
pub mod policy;
pub mod preprocess;
pub mod regression;
pub mod rng;

pub use cmdp::{
    linear_env, nonlinear_env, oracle_counterfactual_trajectory, sample_dataset, Cmdp, CmdpSpec, Dataset,
    EnvKind, Trajectory,
};
pub use error::{Error, Result};
pub use evaluation::{cf_metric, discounted_return, fqe, EvalConfig, EvalReport};
pub use experiment::{run_experiment, ExperimentConfig, ResultRow};
pub use plot::{plot_trends, Panel};
pub use policy::{fqi, greedy_policy, train_baseline, ExperienceTuple, FqiConfig, Method, Policy, QFunction, Representation};
pub use preprocess::{
    deploy_step, estimate_marginals, fit_transition_mean, flap_single_stage, preprocess, AugmentedTuple, Marginals,
    MeanModel, MeanModelConfig, PreprocessedDataset, TransitionMean,
};
pub use regression::{Basis, FeatureMap, LinearModel, MlpModel, Model, TrainConfig};
