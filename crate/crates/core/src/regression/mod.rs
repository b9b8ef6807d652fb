//! Supervised regressors: closed-form least squares over a feature map and
//! a small rectifier network.

mod features;
mod linear;
mod mlp;

pub use features::{Basis, FeatureMap};
pub use linear::{fit_least_squares, fit_least_squares_auto, LeastSquares, LinearModel, DEFAULT_RIDGE};
pub use mlp::{fit_mlp, MlpModel, Targets, TrainConfig};

pub(crate) use linear::{design_matrix, model_from_weights, target_matrix};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// A fitted model evaluable at `(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Model {
    Linear(LinearModel),
    Mlp(MlpModel),
}

impl Model {
    pub fn predict(&self, s: &[f64], a: usize) -> Result<Vec<f64>> {
        match self {
            Model::Linear(m) => m.predict(s, a),
            Model::Mlp(m) => m.predict(s, a),
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            Model::Linear(m) => format!("linear: {}", m.feature_map.descriptor()),
            Model::Mlp(m) => format!("mlp: {:?}", m.sizes),
        }
    }
}

/// Convenience free function mirroring [`Model::predict`].
pub fn predict(model: &Model, s: &[f64], a: usize) -> Result<Vec<f64>> {
    model.predict(s, a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_preserves_predictions() {
        let fm = FeatureMap::new(Basis::Quadratic, 2, 2);
        let states: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
        let actions: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let targets: Vec<Vec<f64>> = states.iter().map(|s| vec![s[0] * 1.3 + 0.1, s[1].exp()]).collect();
        let linear = Model::Linear(fit_least_squares(&states, &actions, &targets, &fm, 1e-6).unwrap());
        let mlp = Model::Mlp(MlpModel::new(&[4, 7, 2], 3).unwrap().with_action_inputs(2));
        for model in [linear, mlp] {
            let json = serde_json::to_string(&model).unwrap();
            let back: Model = serde_json::from_str(&json).unwrap();
            for (s, &a) in states.iter().zip(&actions) {
                let p = model.predict(s, a).unwrap();
                let q = back.predict(s, a).unwrap();
                for (x, y) in p.iter().zip(&q) {
                    assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }
}
