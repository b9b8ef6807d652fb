//! Feedforward rectifier network trained with Adam on mean squared error.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::rng::{self, tag, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            batch_size: 512,
            max_epochs: 1000,
            early_stop_patience: 10,
            early_stop_min_delta: 0.01,
            holdout_fraction: 0.2,
            seed: 0,
            standardize: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return arg_err("holdout_fraction must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return arg_err("batch_size, max_epochs and early_stop_patience must be positive");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return arg_err("learning_rate must be positive");
        }
        Ok(())
    }
}

/// Regression targets for a batch.
#[derive(Clone, Copy)]
pub enum Targets<'a> {
    /// Every output head has a target (`n × m`).
    Full(&'a [Vec<f64>]),
    /// Only head `heads[i]` of row `i` is supervised, with target `values[i]`.
    Selected { heads: &'a [usize], values: &'a [f64] },
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Full(t) => t.len(),
            Targets::Selected { values, .. } => values.len(),
        }
    }
}

/// Multilayer perceptron with rectifier hidden units and a linear output.
///
/// Parameters live in one flat vector, layer by layer, each layer storing
/// its `outputs × inputs` weight matrix row-major followed by its biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub sizes: Vec<usize>,
    pub parameters: Vec<f64>,
    /// When nonzero, `predict(s, a)` feeds `s ++ one_hot(a)`.
    #[serde(default)]
    pub action_inputs: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input_shift: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input_scale: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

impl MlpModel {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return arg_err("layer sizes need an input and an output, all positive");
        }
        let mut rng = rng::stream(&[seed, tag::INIT]);
        let mut parameters = Vec::new();
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1] + w[1]) {
                parameters.push(rng.random_range(-bound..bound));
            }
        }
        Ok(MlpModel {
            sizes: sizes.to_vec(),
            parameters,
            action_inputs: 0,
            input_shift: Vec::new(),
            input_scale: Vec::new(),
        })
    }

    pub fn with_action_inputs(mut self, action_count: usize) -> Self {
        self.action_inputs = action_count;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut out = vec![0];
        for w in self.sizes.windows(2) {
            out.push(out.last().unwrap() + w[0] * w[1] + w[1]);
        }
        out
    }

    /// Index range of the output layer's biases.
    pub fn output_bias_range(&self) -> std::ops::Range<usize> {
        let end = self.parameters.len();
        end - self.output_dim()..end
    }

    /// Index range of the output layer's weights.
    pub fn output_weight_range(&self) -> std::ops::Range<usize> {
        let l = self.layer_count();
        let fan_in = self.sizes[l - 1];
        let start = self.layer_offsets()[l - 1];
        start..start + fan_in * self.output_dim()
    }

    fn prepare(&self, x: &[f64]) -> Vec<f64> {
        if self.input_shift.is_empty() {
            x.to_vec()
        } else {
            x.iter()
                .zip(self.input_shift.iter().zip(&self.input_scale))
                .map(|(v, (m, s))| (v - m) / s)
                .collect()
        }
    }

    /// Returns pre-activations of every layer; the last entry is the output.
    fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let offsets = self.layer_offsets();
        let mut pre = Vec::with_capacity(self.layer_count());
        let mut act = self.prepare(x);
        for l in 0..self.layer_count() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.parameters[offsets[l]..offsets[l] + fan_in * fan_out];
            let b = &self.parameters[offsets[l] + fan_in * fan_out..offsets[l + 1]];
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    b[o] + row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>()
                })
                .collect();
            act = if l + 1 < self.layer_count() { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
            pre.push(z);
        }
        pre
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return arg_err(format!("network expects input of dimension {}, got {}", self.input_dim(), x.len()));
        }
        Ok(self.forward_all(x).pop().unwrap())
    }

    /// Builds the network input for `(s, a)` according to `action_inputs`.
    pub fn encode(&self, s: &[f64], a: usize) -> Result<Vec<f64>> {
        if self.action_inputs == 0 {
            return Ok(s.to_vec());
        }
        if a >= self.action_inputs {
            return arg_err(format!("action {a} out of range for {} actions", self.action_inputs));
        }
        let mut x = s.to_vec();
        x.extend((0..self.action_inputs).map(|i| if i == a { 1.0 } else { 0.0 }));
        Ok(x)
    }

    pub fn predict(&self, s: &[f64], a: usize) -> Result<Vec<f64>> {
        self.forward(&self.encode(s, a)?)
    }

    /// Accumulates the gradient of one row's loss into `grad`; returns the loss.
    fn backprop_row(&self, x: &[f64], target: RowTarget<'_>, scale: f64, grad: &mut [f64]) -> f64 {
        let offsets = self.layer_offsets();
        let input = self.prepare(x);
        let pre = self.forward_all(x);
        let out = pre.last().unwrap();
        let (loss, mut delta) = match target {
            RowTarget::Full(y) => {
                let loss = out.iter().zip(y).map(|(o, y)| (o - y).powi(2)).sum::<f64>();
                (loss, out.iter().zip(y).map(|(o, y)| 2.0 * (o - y) * scale).collect::<Vec<_>>())
            }
            RowTarget::Head(h, y) => {
                let mut d = vec![0.0; out.len()];
                d[h] = 2.0 * (out[h] - y) * scale;
                ((out[h] - y).powi(2), d)
            }
        };
        for l in (0..self.layer_count()).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w_start = offsets[l];
            let b_start = w_start + fan_in * fan_out;
            let prev_act: Vec<f64> = if l == 0 { input.clone() } else { pre[l - 1].iter().map(|v| v.max(0.0)).collect() };
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[b_start + o] += d;
                let g = &mut grad[w_start + o * fan_in..w_start + (o + 1) * fan_in];
                for (gi, a) in g.iter_mut().zip(&prev_act) {
                    *gi += d * a;
                }
            }
            if l > 0 {
                let w = &self.parameters[w_start..b_start];
                let mut back = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d != 0.0 {
                        for (bi, wi) in back.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                            *bi += d * wi;
                        }
                    }
                }
                for (bi, z) in back.iter_mut().zip(&pre[l - 1]) {
                    if *z <= 0.0 {
                        *bi = 0.0;
                    }
                }
                delta = back;
            }
        }
        loss
    }

    /// Mean squared error over `rows` and its gradient with respect to
    /// [`MlpModel::parameters`]. For full targets the mean runs over rows and
    /// heads; for selected heads over rows.
    pub fn loss_and_gradient(&self, inputs: &[Vec<f64>], targets: Targets<'_>, rows: &[usize]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.parameters.len()];
        let denom = match targets {
            Targets::Full(_) => (rows.len() * self.output_dim()) as f64,
            Targets::Selected { .. } => rows.len() as f64,
        };
        let scale = 1.0 / denom;
        let mut total = 0.0;
        for &i in rows {
            total += self.backprop_row(&inputs[i], row_target(targets, i), scale, &mut grad);
        }
        (total / denom, grad)
    }

    pub fn loss(&self, inputs: &[Vec<f64>], targets: Targets<'_>, rows: &[usize]) -> f64 {
        let mut total = 0.0;
        for &i in rows {
            let out = self.forward_all(&inputs[i]).pop().unwrap();
            total += match row_target(targets, i) {
                RowTarget::Full(y) => out.iter().zip(y).map(|(o, y)| (o - y).powi(2)).sum::<f64>(),
                RowTarget::Head(h, y) => (out[h] - y).powi(2),
            };
        }
        let denom = match targets {
            Targets::Full(_) => (rows.len() * self.output_dim()) as f64,
            Targets::Selected { .. } => rows.len() as f64,
        };
        total / denom
    }

    fn check_data(&self, inputs: &[Vec<f64>], targets: Targets<'_>) -> Result<()> {
        if inputs.is_empty() {
            return arg_err("no training rows");
        }
        if targets.len() != inputs.len() {
            return arg_err(format!("{} targets for {} inputs", targets.len(), inputs.len()));
        }
        if inputs.iter().any(|x| x.len() != self.input_dim()) {
            return arg_err(format!("inputs must have dimension {}", self.input_dim()));
        }
        match targets {
            Targets::Full(t) => {
                if t.iter().any(|y| y.len() != self.output_dim()) {
                    return arg_err(format!("targets must have dimension {}", self.output_dim()));
                }
            }
            Targets::Selected { heads, .. } => {
                if heads.len() != inputs.len() || heads.iter().any(|&h| h >= self.output_dim()) {
                    return arg_err("selected heads out of range");
                }
            }
        }
        Ok(())
    }

    /// Runs `steps` Adam updates from the current parameters. Each step uses
    /// the full data when `batch_size` is `None` or covers every row, and a
    /// uniformly sampled batch otherwise. Returns the loss of the last batch.
    pub fn train_steps(
        &mut self,
        inputs: &[Vec<f64>],
        targets: Targets<'_>,
        steps: usize,
        learning_rate: f64,
        batch_size: Option<usize>,
        rng: &mut StreamRng,
    ) -> Result<f64> {
        self.check_data(inputs, targets)?;
        let n = inputs.len();
        let mut adam = Adam::new(self.parameters.len());
        let mut rows: Vec<usize> = (0..n).collect();
        let batch = batch_size.unwrap_or(n).min(n).max(1);
        let mut last = 0.0;
        for step in 0..steps {
            let chosen: &[usize] = if batch < n {
                rows.partial_shuffle(rng, batch).0
            } else {
                &rows
            };
            let (loss, grad) = self.loss_and_gradient(inputs, targets, chosen);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch: step, loss });
            }
            adam.update(&mut self.parameters, &grad, learning_rate);
            last = loss;
        }
        Ok(last)
    }
}

#[derive(Clone, Copy)]
enum RowTarget<'a> {
    Full(&'a [f64]),
    Head(usize, f64),
}

fn row_target<'a>(targets: Targets<'a>, i: usize) -> RowTarget<'a> {
    match targets {
        Targets::Full(t) => RowTarget::Full(&t[i]),
        Targets::Selected { heads, values } => RowTarget::Head(heads[i], values[i]),
    }
}

/// Fits a network `inputs -> targets` with hidden layer widths `hidden`.
///
/// Rows are shuffled and split by `holdout_fraction`; training runs
/// mini-batch Adam and stops once the monitored loss (holdout, or training
/// loss when there is no holdout) has not improved by more than
/// `early_stop_min_delta` for `early_stop_patience` consecutive epochs. The
/// parameters with the lowest monitored loss are returned.
pub fn fit_mlp(inputs: &[Vec<f64>], targets: &[Vec<f64>], hidden: &[usize], config: &TrainConfig) -> Result<MlpModel> {
    config.validate()?;
    if inputs.is_empty() {
        return arg_err("no training rows");
    }
    if config.holdout_fraction > 0.0 && inputs.len() < 2 {
        return arg_err("a holdout split needs at least two rows");
    }
    let in_dim = inputs[0].len();
    let out_dim = targets.first().map_or(0, Vec::len);
    let mut sizes = vec![in_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(out_dim);
    let mut model = MlpModel::new(&sizes, config.seed)?;
    let targets_ref = Targets::Full(targets);
    model.check_data(inputs, targets_ref)?;

    let n = inputs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = rng::stream(&[config.seed, tag::SPLIT]);
    let (train, holdout) = if config.holdout_fraction > 0.0 {
        order.shuffle(&mut split_rng);
        let n_hold = ((n as f64 * config.holdout_fraction).round() as usize).clamp(1, n - 1);
        let (h, t) = order.split_at(n_hold);
        (t.to_vec(), h.to_vec())
    } else {
        (order, Vec::new())
    };

    if config.standardize {
        let mut shift = vec![0.0; in_dim];
        let mut scale = vec![0.0; in_dim];
        for &i in &train {
            for (m, x) in shift.iter_mut().zip(&inputs[i]) {
                *m += x / train.len() as f64;
            }
        }
        for &i in &train {
            for ((v, x), m) in scale.iter_mut().zip(&inputs[i]).zip(&shift) {
                *v += (x - m).powi(2) / train.len() as f64;
            }
        }
        for v in scale.iter_mut() {
            *v = if *v > 0.0 { v.sqrt() } else { 1.0 };
        }
        model.input_shift = shift;
        model.input_scale = scale;
    }

    let monitored = if holdout.is_empty() { &train } else { &holdout };
    let mut batch_rng = rng::stream(&[config.seed, tag::BATCH]);
    let mut adam = Adam::new(model.parameters.len());
    let mut best_loss = f64::INFINITY;
    let mut best_params = model.parameters.clone();
    let mut reference = f64::INFINITY;
    let mut stale = 0;
    let mut train_rows = train.clone();
    for epoch in 0..config.max_epochs {
        train_rows.shuffle(&mut batch_rng);
        for chunk in train_rows.chunks(config.batch_size) {
            let (loss, grad) = model.loss_and_gradient(inputs, targets_ref, chunk);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            adam.update(&mut model.parameters, &grad, config.learning_rate);
        }
        let loss = model.loss(inputs, targets_ref, monitored);
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        if loss < best_loss {
            best_loss = loss;
            best_params.clone_from(&model.parameters);
        }
        if loss < reference - config.early_stop_min_delta {
            reference = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                break;
            }
        }
    }
    model.parameters = best_params;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
    }

    /// Central finite differences, independent of the backprop path.
    fn numeric_gradient(model: &MlpModel, inputs: &[Vec<f64>], targets: Targets<'_>, rows: &[usize]) -> Vec<f64> {
        let h = 1e-5;
        let mut probe = model.clone();
        (0..model.parameters.len())
            .map(|i| {
                let orig = probe.parameters[i];
                probe.parameters[i] = orig + h;
                let up = probe.loss(inputs, targets, rows);
                probe.parameters[i] = orig - h;
                let down = probe.loss(inputs, targets, rows);
                probe.parameters[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let model = MlpModel::new(&[3, 5, 4, 2], seed).unwrap();
            let inputs = random_rows(7, 3, seed + 100);
            let targets = random_rows(7, 2, seed + 200);
            let rows: Vec<usize> = (0..7).collect();
            let (_, analytic) = model.loss_and_gradient(&inputs, Targets::Full(&targets), &rows);
            let numeric = numeric_gradient(&model, &inputs, Targets::Full(&targets), &rows);
            let err = max_relative_error(&analytic, &numeric);
            assert!(err <= 1e-4, "seed {seed}: relative error {err}");

            let heads: Vec<usize> = (0..7).map(|i| i % 2).collect();
            let values: Vec<f64> = targets.iter().map(|t| t[0]).collect();
            let sel = Targets::Selected { heads: &heads, values: &values };
            let (_, analytic) = model.loss_and_gradient(&inputs, sel, &rows);
            let numeric = numeric_gradient(&model, &inputs, sel, &rows);
            assert!(max_relative_error(&analytic, &numeric) <= 1e-4);
        }
    }

    #[test]
    fn zero_output_layer_yields_bias() {
        let mut model = MlpModel::new(&[2, 4, 3], 9).unwrap();
        let w = model.output_weight_range();
        model.parameters[w].fill(0.0);
        let b = model.output_bias_range();
        let bias = model.parameters[b].to_vec();
        assert_eq!(model.forward(&[0.7, -3.0]).unwrap(), bias);
    }

    #[test]
    fn constant_target_is_learned() {
        let inputs = random_rows(300, 2, 1);
        let targets = vec![vec![2.5]; 300];
        let config = TrainConfig { learning_rate: 0.01, batch_size: 64, max_epochs: 300, early_stop_min_delta: 0.0, early_stop_patience: 20, ..Default::default() };
        let model = fit_mlp(&inputs, &targets, &[8], &config).unwrap();
        let rows: Vec<usize> = (0..300).collect();
        assert!(model.loss(&inputs, Targets::Full(&targets), &rows) <= 1e-3);
    }

    #[test]
    fn fits_sine() {
        let n = 2000;
        let inputs: Vec<Vec<f64>> = (0..n).map(|i| vec![-3.0 + 6.0 * i as f64 / (n - 1) as f64]).collect();
        let targets: Vec<Vec<f64>> = inputs.iter().map(|x| vec![x[0].sin()]).collect();
        let config = TrainConfig { learning_rate: 0.005, batch_size: 64, max_epochs: 400, early_stop_min_delta: 1e-5, early_stop_patience: 20, seed: 4, ..Default::default() };
        let model = fit_mlp(&inputs, &targets, &[64, 64], &config).unwrap();
        // held-out grid between training points, against the analytic function
        let mse = (0..500)
            .map(|i| {
                let x = -3.0 + 6.0 * (i as f64 + 0.5) / 500.0;
                (model.forward(&[x]).unwrap()[0] - x.sin()).powi(2)
            })
            .sum::<f64>()
            / 500.0;
        assert!(mse <= 0.01, "holdout mse {mse}");
    }

    #[test]
    fn training_is_deterministic() {
        let inputs = random_rows(100, 2, 3);
        let targets: Vec<Vec<f64>> = inputs.iter().map(|x| vec![x[0] * x[1]]).collect();
        let config = TrainConfig { max_epochs: 20, batch_size: 16, ..Default::default() };
        let a = fit_mlp(&inputs, &targets, &[6], &config).unwrap();
        let b = fit_mlp(&inputs, &targets, &[6], &config).unwrap();
        assert_eq!(a.parameters, b.parameters);
    }

    #[test]
    fn full_batch_is_order_invariant() {
        let inputs = random_rows(40, 2, 5);
        let targets: Vec<Vec<f64>> = inputs.iter().map(|x| vec![x[0] - 2.0 * x[1]]).collect();
        let config = TrainConfig { max_epochs: 30, batch_size: 1000, holdout_fraction: 0.0, ..Default::default() };
        let a = fit_mlp(&inputs, &targets, &[5], &config).unwrap();
        let rev_in: Vec<_> = inputs.iter().rev().cloned().collect();
        let rev_t: Vec<_> = targets.iter().rev().cloned().collect();
        let b = fit_mlp(&rev_in, &rev_t, &[5], &config).unwrap();
        for (x, y) in a.parameters.iter().zip(&b.parameters) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let inputs = random_rows(20, 1, 2);
        let targets = vec![vec![f64::NAN]; 20];
        let config = TrainConfig { holdout_fraction: 0.0, ..Default::default() };
        assert!(matches!(fit_mlp(&inputs, &targets, &[3], &config), Err(Error::Divergence { epoch: 0, .. })));
    }

    #[test]
    fn bad_config_and_shapes() {
        let inputs = random_rows(1, 1, 2);
        let targets = vec![vec![1.0]];
        assert!(fit_mlp(&inputs, &targets, &[3], &TrainConfig::default()).is_err());
        let bad = TrainConfig { holdout_fraction: 1.0, ..Default::default() };
        assert!(fit_mlp(&inputs, &targets, &[3], &bad).is_err());
        let model = MlpModel::new(&[2, 3, 1], 0).unwrap();
        assert!(model.forward(&[1.0]).is_err());
    }
}
