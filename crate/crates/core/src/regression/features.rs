use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

/// Per-block basis over the continuous part of the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// `(1, s)`.
    Affine,
    /// `(1, s, s_i s_j for i <= j)`.
    Quadratic,
    /// `(1, s, sin s, cos s)` elementwise.
    Trigonometric,
    /// One-hot of `round(s_0)` over `n_states` cells; needs a scalar state.
    Tabular { n_states: usize },
}

impl Basis {
    pub fn dimension(&self, state_dim: usize) -> usize {
        match self {
            Basis::Affine => 1 + state_dim,
            Basis::Quadratic => 1 + state_dim + state_dim * (state_dim + 1) / 2,
            Basis::Trigonometric => 1 + 3 * state_dim,
            Basis::Tabular { n_states } => *n_states,
        }
    }

    fn write(&self, s: &[f64], out: &mut [f64]) {
        match self {
            Basis::Affine => {
                out[0] = 1.0;
                out[1..].copy_from_slice(s);
            }
            Basis::Quadratic => {
                let d = s.len();
                out[0] = 1.0;
                out[1..=d].copy_from_slice(s);
                let mut k = d + 1;
                for i in 0..d {
                    for j in i..d {
                        out[k] = s[i] * s[j];
                        k += 1;
                    }
                }
            }
            Basis::Trigonometric => {
                let d = s.len();
                out[0] = 1.0;
                for (i, &x) in s.iter().enumerate() {
                    out[1 + i] = x;
                    out[1 + d + i] = x.sin();
                    out[1 + 2 * d + i] = x.cos();
                }
            }
            Basis::Tabular { n_states } => {
                let cell = s[0].round();
                if cell >= 0.0 && (cell as usize) < *n_states {
                    out[cell as usize] = 1.0;
                }
            }
        }
    }
}

/// Feature map `phi(s, a)`.
///
/// The input vector is `state_dim` continuous coordinates, optionally
/// followed by a one-hot attribute of length `attribute_groups`. The map is
/// block-structured: `one_hot(a) ⊗ one_hot(z) ⊗ basis(s)`, i.e. an
/// independent submodel per action (and per attribute, when grouped).
///
/// Features are not clipped. Gaussian states make a sup-norm bound
/// impossible, so `sup_norm_bound` is declared for documentation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub basis: Basis,
    pub state_dim: usize,
    pub action_count: usize,
    #[serde(default)]
    pub attribute_groups: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_hint: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sup_norm_bound: Option<f64>,
}

impl FeatureMap {
    pub fn new(basis: Basis, state_dim: usize, action_count: usize) -> Self {
        FeatureMap {
            basis,
            state_dim,
            action_count,
            attribute_groups: 0,
            lipschitz_hint: None,
            sup_norm_bound: None,
        }
    }

    /// Splits the input's trailing one-hot attribute into separate blocks.
    pub fn grouped_by_attribute(mut self, k: usize) -> Self {
        self.attribute_groups = k;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.attribute_groups
    }

    fn block_dim(&self) -> usize {
        self.basis.dimension(self.state_dim)
    }

    pub fn dimension(&self) -> usize {
        self.action_count * self.attribute_groups.max(1) * self.block_dim()
    }

    pub fn descriptor(&self) -> String {
        let basis = match &self.basis {
            Basis::Affine => "affine".to_string(),
            Basis::Quadratic => "quadratic".to_string(),
            Basis::Trigonometric => "trigonometric".to_string(),
            Basis::Tabular { n_states } => format!("tabular({n_states})"),
        };
        let mut out = format!("{basis}[d={}] x action({})", self.state_dim, self.action_count);
        if self.attribute_groups > 0 {
            out.push_str(&format!(" x attribute({})", self.attribute_groups));
        }
        out
    }

    pub fn check(&self, s: &[f64], a: usize) -> Result<()> {
        if s.len() != self.input_dim() {
            return arg_err(format!(
                "feature map expects input of dimension {}, got {}",
                self.input_dim(),
                s.len()
            ));
        }
        if a >= self.action_count {
            return arg_err(format!("action {a} out of range for {} actions", self.action_count));
        }
        if matches!(self.basis, Basis::Tabular { .. }) && self.state_dim != 1 {
            return arg_err("tabular basis needs a scalar state");
        }
        Ok(())
    }

    fn group_of(&self, s: &[f64]) -> usize {
        if self.attribute_groups == 0 {
            return 0;
        }
        let tail = &s[self.state_dim..];
        tail.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }

    /// Writes `phi(s, a)` into `out`, which must have length `dimension()`.
    /// Inputs are assumed checked.
    pub fn write(&self, s: &[f64], a: usize, out: &mut [f64]) {
        out.fill(0.0);
        let block = self.block_dim();
        let groups = self.attribute_groups.max(1);
        let offset = (a * groups + self.group_of(s)) * block;
        self.basis.write(&s[..self.state_dim], &mut out[offset..offset + block]);
    }

    pub fn evaluate(&self, s: &[f64], a: usize) -> Result<Vec<f64>> {
        self.check(s, a)?;
        let mut out = vec![0.0; self.dimension()];
        self.write(s, a, &mut out);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimensions() {
        assert_eq!(FeatureMap::new(Basis::Affine, 1, 2).dimension(), 4);
        assert_eq!(FeatureMap::new(Basis::Quadratic, 2, 2).dimension(), 12);
        assert_eq!(FeatureMap::new(Basis::Affine, 1, 2).grouped_by_attribute(2).dimension(), 8);
        assert_eq!(FeatureMap::new(Basis::Trigonometric, 1, 3).dimension(), 12);
    }

    #[test]
    fn blocks_are_disjoint() {
        let fm = FeatureMap::new(Basis::Affine, 1, 2).grouped_by_attribute(2);
        let v = fm.evaluate(&[2.0, 0.0, 1.0], 1).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0]);
        let v = fm.evaluate(&[2.0, 1.0, 0.0], 0).unwrap();
        assert_eq!(v, vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn quadratic_terms() {
        let fm = FeatureMap::new(Basis::Quadratic, 2, 1);
        let v = fm.evaluate(&[2.0, 3.0], 0).unwrap();
        assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let fm = FeatureMap::new(Basis::Affine, 2, 2);
        assert!(fm.evaluate(&[1.0], 0).is_err());
        assert!(fm.evaluate(&[1.0, 2.0], 2).is_err());
    }
}
