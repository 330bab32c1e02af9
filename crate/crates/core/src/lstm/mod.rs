//! Stacked LSTM regressor for one-step-ahead speed forecasting.
//!
//! Cell equations (no peepholes), per layer and time step:
//!
//! ```text
//! i = σ(W_i x + U_i h + b_i)      f = σ(W_f x + U_f h + b_f)
//! o = σ(W_o x + U_o h + b_o)      g = tanh(W_g x + U_g h + b_g)
//! c ← f ⊙ c + i ⊙ g               h ← o ⊙ tanh(c)
//! ```
//!
//! Layer 0 reads one normalized speed per step, higher layers read the
//! hidden state of the layer below. The prediction is a linear readout of
//! the top layer's last hidden state. Initial `h` and `c` are zero.

mod network;
mod train;

use std::fmt;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvaluationReport;
use crate::nmm::GridSpec;

pub use network::Workspace;
pub use train::{gradient_check, train, TrainingConfig, TrainingOutcome};

/// Version tag written into every serialized model.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// One point of the search grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterSetting {
    pub learning_rate: f64,
    pub layers: usize,
    pub units: usize,
    pub epochs: usize,
}

impl HyperparameterSetting {
    /// The deliberately small starting point of every search.
    pub const PREDEFINED: HyperparameterSetting = HyperparameterSetting {
        learning_rate: 0.01,
        layers: 1,
        units: 2,
        epochs: 100,
    };

    pub fn as_array(&self) -> [f64; 4] {
        [
            self.learning_rate,
            self.layers as f64,
            self.units as f64,
            self.epochs as f64,
        ]
    }
}

impl fmt::Display for HyperparameterSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(lr={}, layers={}, units={}, epochs={})",
            self.learning_rate, self.layers, self.units, self.epochs
        )
    }
}

/// Dense row-major matrix. Serializes as an array of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl Serialize for Matrix {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = serializer.serialize_seq(Some(self.rows))?;
        for r in 0..self.rows {
            seq.serialize_element(self.row(r))?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(serde::de::Error::custom("matrix must be a non-empty rectangle"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }
}

/// Input projection, recurrent matrix, and bias of one gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub input: Matrix,
    pub recurrent: Matrix,
    pub bias: Vec<f64>,
}

impl Gate {
    fn zeros(hidden: usize, input: usize) -> Self {
        Gate {
            input: Matrix::zeros(hidden, input),
            recurrent: Matrix::zeros(hidden, hidden),
            bias: vec![0.0; hidden],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub input_gate: Gate,
    pub forget_gate: Gate,
    pub output_gate: Gate,
    pub candidate: Gate,
}

impl Layer {
    fn zeros(hidden: usize, input: usize) -> Self {
        Layer {
            input_gate: Gate::zeros(hidden, input),
            forget_gate: Gate::zeros(hidden, input),
            output_gate: Gate::zeros(hidden, input),
            candidate: Gate::zeros(hidden, input),
        }
    }

    /// Gates in the fixed order input, forget, output, candidate.
    pub fn gates(&self) -> [&Gate; 4] {
        [
            &self.input_gate,
            &self.forget_gate,
            &self.output_gate,
            &self.candidate,
        ]
    }

    fn gates_mut(&mut self) -> [&mut Gate; 4] {
        [
            &mut self.input_gate,
            &mut self.forget_gate,
            &mut self.output_gate,
            &mut self.candidate,
        ]
    }

    pub fn hidden_size(&self) -> usize {
        self.input_gate.bias.len()
    }

    pub fn input_size(&self) -> usize {
        self.input_gate.input.cols()
    }
}

/// All trainable parameters. Gradients use the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub layers: Vec<Layer>,
    pub output_weights: Vec<f64>,
    pub output_bias: f64,
}

impl Weights {
    pub fn zeros(layers: usize, units: usize) -> Self {
        Weights {
            layers: (0..layers)
                .map(|l| Layer::zeros(units, if l == 0 { 1 } else { units }))
                .collect(),
            output_weights: vec![0.0; units],
            output_bias: 0.0,
        }
    }

    /// Parameter blocks in a fixed order: per layer, per gate (input,
    /// forget, output, candidate) the input matrix, recurrent matrix, and
    /// bias; then the readout weights and bias.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 12 + 2);
        for layer in &self.layers {
            for gate in layer.gates() {
                out.push(gate.input.as_slice());
                out.push(gate.recurrent.as_slice());
                out.push(gate.bias.as_slice());
            }
        }
        out.push(&self.output_weights);
        out.push(std::slice::from_ref(&self.output_bias));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 12 + 2);
        for layer in &mut self.layers {
            for gate in layer.gates_mut() {
                out.push(gate.input.as_mut_slice());
                out.push(gate.recurrent.as_mut_slice());
                out.push(gate.bias.as_mut_slice());
            }
        }
        out.push(&mut self.output_weights);
        out.push(std::slice::from_mut(&mut self.output_bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn fill_zero(&mut self) {
        for block in self.blocks_mut() {
            block.fill(0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// A trained (or freshly initialized) forecaster and the context needed to
/// use it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    pub format_version: u32,
    pub setting: HyperparameterSetting,
    pub window_length: usize,
    /// Normalization constant in mph.
    pub f: f64,
    pub weights: Weights,
}

impl LstmModel {
    /// A model whose every weight and bias is zero. Predicts 0 for any input.
    pub fn zeroed(setting: HyperparameterSetting, window_length: usize, f: f64) -> Self {
        LstmModel {
            format_version: MODEL_FORMAT_VERSION,
            setting,
            window_length,
            f,
            weights: Weights::zeros(setting.layers, setting.units),
        }
    }

    /// Shape and finiteness checks for models read from outside.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "model format version {} (expected {MODEL_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let units = self.setting.units;
        let shape_ok = self.window_length >= 1
            && self.f > 0.0
            && self.f.is_finite()
            && units >= 1
            && self.weights.layers.len() == self.setting.layers
            && self.weights.output_weights.len() == units
            && self.weights.layers.iter().enumerate().all(|(l, layer)| {
                let input = if l == 0 { 1 } else { units };
                layer.gates().iter().all(|g| {
                    g.input.rows() == units
                        && g.input.cols() == input
                        && g.recurrent.rows() == units
                        && g.recurrent.cols() == units
                        && g.bias.len() == units
                })
            });
        if !shape_ok {
            return Err(Error::Format("model weights do not match its setting".into()));
        }
        if !self.weights.all_finite() {
            return Err(Error::Format("model contains non-finite weights".into()));
        }
        Ok(())
    }

    /// Normalized one-step prediction from one input window.
    pub fn predict(&self, window: &[f64]) -> Result<f64> {
        let mut ws = Workspace::new(self);
        ws.forward(&self.weights, window)
    }
}

/// Fresh model for `setting`: every parameter uniform in ±1/√units drawn
/// from ChaCha8 seeded with `seed`, then forget-gate biases set to 1.
pub fn init_model(
    setting: &HyperparameterSetting,
    grid: &GridSpec,
    window_length: usize,
    f: f64,
    seed: u64,
) -> Result<LstmModel> {
    grid.validate()?;
    if !grid.contains(setting) {
        return Err(Error::config(format!(
            "setting {setting} is not on the search grid"
        )));
    }
    if window_length == 0 {
        return Err(Error::config("window length must be at least 1"));
    }
    if !(f > 0.0 && f.is_finite()) {
        return Err(Error::config(format!(
            "normalization constant must be positive, got {f}"
        )));
    }
    let mut model = LstmModel::zeroed(*setting, window_length, f);
    let bound = 1.0 / (setting.units as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for block in model.weights.blocks_mut() {
        for v in block.iter_mut() {
            *v = dist.sample(&mut rng);
        }
    }
    for layer in &mut model.weights.layers {
        layer.forget_gate.bias.fill(1.0);
    }
    Ok(model)
}

/// Forward pass on one window; `model.predict` under a free-function name.
pub fn forward(model: &LstmModel, window: &[f64]) -> Result<f64> {
    model.predict(window)
}

/// Teacher-forced one-step-ahead forecasts (mph) for every position of
/// `segment` that has a full window of actual values before it.
pub fn predict_series(model: &LstmModel, segment: &[f64]) -> Result<Vec<f64>> {
    let w = model.window_length;
    if segment.len() <= w {
        return Err(Error::data(format!(
            "segment of length {} is too short for window {w}",
            segment.len()
        )));
    }
    let mut ws = Workspace::new(model);
    (0..segment.len() - w)
        .map(|k| Ok(ws.forward(&model.weights, &segment[k..k + w])? * model.f))
        .collect()
}

/// Forecast a normalized segment and score it against its de-normalized
/// tail.
pub fn evaluate(model: &LstmModel, segment: &[f64]) -> Result<EvaluationReport> {
    let forecast = predict_series(model, segment)?;
    let actual: Vec<f64> = segment[model.window_length..]
        .iter()
        .map(|v| v * model.f)
        .collect();
    EvaluationReport::compute(&actual, &forecast)
}
