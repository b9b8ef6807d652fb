use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::features::FeatureMap;
use crate::error::{arg_err, Error, Result};

pub const DEFAULT_RIDGE: f64 = 1e-8;
const MAX_AUTO_RIDGE: f64 = 1e-2;
/// Gram eigenvalues below this fraction of the largest count as null directions.
const RANK_TOLERANCE: f64 = 1e-12;

/// `prediction = weightsᵀ · phi(s, a)`, one column per output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub feature_map: FeatureMap,
    /// `dimension × heads`, row per feature.
    pub weights: Vec<Vec<f64>>,
    pub ridge: f64,
}

impl LinearModel {
    pub fn zeros(feature_map: FeatureMap, heads: usize) -> Self {
        let d = feature_map.dimension();
        LinearModel { feature_map, weights: vec![vec![0.0; heads]; d], ridge: 0.0 }
    }

    pub fn heads(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn predict(&self, s: &[f64], a: usize) -> Result<Vec<f64>> {
        let phi = self.feature_map.evaluate(s, a)?;
        Ok(self.predict_features(&phi))
    }

    pub fn predict_features(&self, phi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.heads()];
        for (f, row) in phi.iter().zip(&self.weights) {
            if *f != 0.0 {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += f * w;
                }
            }
        }
        out
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().flatten().map(|w| w * w).sum::<f64>().sqrt()
    }

    fn from_matrix(feature_map: FeatureMap, w: &DMatrix<f64>, ridge: f64) -> Self {
        let weights = (0..w.nrows()).map(|i| w.row(i).iter().copied().collect()).collect();
        LinearModel { feature_map, weights, ridge }
    }
}

/// Factorized `ΦᵀΦ + ridge·I` for a fixed design, reusable across many
/// right-hand sides (FQI refits the same design every iteration).
pub struct LeastSquares {
    design: DMatrix<f64>,
    factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    ridge: f64,
}

impl LeastSquares {
    /// Factorizes with exactly `ridge`. With `ridge == 0` a singular design is
    /// reported as [`Error::RankDeficient`].
    pub fn new(design: DMatrix<f64>, ridge: f64) -> Result<Self> {
        if ridge < 0.0 || !ridge.is_finite() {
            return arg_err(format!("ridge must be a nonnegative finite number, got {ridge}"));
        }
        if design.nrows() == 0 {
            return arg_err("least squares needs at least one row");
        }
        let mut gram = design.tr_mul(&design);
        if ridge == 0.0 {
            let null = null_directions(&gram);
            if null > 0 {
                return Err(Error::RankDeficient { null_directions: null });
            }
        }
        for i in 0..gram.nrows() {
            gram[(i, i)] += ridge;
        }
        let factor = gram.cholesky().ok_or(Error::Factorization { ridge })?;
        Ok(LeastSquares { design, factor, ridge })
    }

    /// Starts at `ridge` and multiplies by 10 on factorization failure, up to 1e-2.
    pub fn new_auto(design: DMatrix<f64>, ridge: f64) -> Result<Self> {
        let mut current = if ridge > 0.0 { ridge } else { DEFAULT_RIDGE };
        loop {
            match LeastSquares::new(design.clone(), current) {
                Err(Error::Factorization { .. }) if current * 10.0 <= MAX_AUTO_RIDGE * (1.0 + 1e-9) => {
                    warn!("least-squares factorization failed at ridge {current:e}; retrying at {:e}", current * 10.0);
                    current *= 10.0;
                }
                other => return other,
            }
        }
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    /// Weights for targets `Y` (`n × m`).
    pub fn solve(&self, targets: &DMatrix<f64>) -> DMatrix<f64> {
        let rhs = self.design.tr_mul(targets);
        self.factor.solve(&rhs)
    }
}

fn null_directions(gram: &DMatrix<f64>) -> usize {
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return gram.nrows();
    }
    eig.eigenvalues.iter().filter(|v| **v <= max * RANK_TOLERANCE).count()
}

pub(crate) fn design_matrix(fm: &FeatureMap, states: &[Vec<f64>], actions: &[usize]) -> Result<DMatrix<f64>> {
    if states.len() != actions.len() {
        return arg_err("states and actions differ in length");
    }
    let d = fm.dimension();
    let mut design = DMatrix::zeros(states.len(), d);
    let mut row = vec![0.0; d];
    for (i, (s, &a)) in states.iter().zip(actions).enumerate() {
        fm.check(s, a)?;
        fm.write(s, a, &mut row);
        for (j, v) in row.iter().enumerate() {
            if *v != 0.0 {
                design[(i, j)] = *v;
            }
        }
    }
    Ok(design)
}

pub(crate) fn target_matrix(targets: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let m = targets.first().map_or(0, Vec::len);
    if m == 0 || targets.iter().any(|t| t.len() != m) {
        return arg_err("targets must be a nonempty rectangular n × m array");
    }
    Ok(DMatrix::from_fn(targets.len(), m, |i, j| targets[i][j]))
}

/// Closed-form ridge regression `(ΦᵀΦ + ridge·I)⁻¹ ΦᵀY`.
pub fn fit_least_squares(
    states: &[Vec<f64>],
    actions: &[usize],
    targets: &[Vec<f64>],
    feature_map: &FeatureMap,
    ridge: f64,
) -> Result<LinearModel> {
    if targets.len() != states.len() {
        return arg_err(format!(
            "{} targets for {} inputs",
            targets.len(),
            states.len()
        ));
    }
    let design = design_matrix(feature_map, states, actions)?;
    let y = target_matrix(targets)?;
    let solver = LeastSquares::new(design, ridge)?;
    Ok(LinearModel::from_matrix(feature_map.clone(), &solver.solve(&y), ridge))
}

/// [`fit_least_squares`] with automatic ridge escalation on factorization failure.
pub fn fit_least_squares_auto(
    states: &[Vec<f64>],
    actions: &[usize],
    targets: &[Vec<f64>],
    feature_map: &FeatureMap,
    ridge: f64,
) -> Result<LinearModel> {
    if targets.len() != states.len() {
        return arg_err(format!("{} targets for {} inputs", targets.len(), states.len()));
    }
    let design = design_matrix(feature_map, states, actions)?;
    let y = target_matrix(targets)?;
    let solver = LeastSquares::new_auto(design, ridge)?;
    Ok(LinearModel::from_matrix(feature_map.clone(), &solver.solve(&y), solver.ridge()))
}

pub(crate) fn model_from_weights(fm: &FeatureMap, w: &DMatrix<f64>, ridge: f64) -> LinearModel {
    LinearModel::from_matrix(fm.clone(), w, ridge)
}
