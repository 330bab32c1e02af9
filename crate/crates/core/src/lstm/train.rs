use serde::{Deserialize, Serialize};

use super::{LstmModel, Weights, Workspace};
use crate::data::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Global gradient-norm ceiling applied per mini-batch.
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 32,
            grad_clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.grad_clip_norm > 0.0) {
            return Err(Error::config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub model: LstmModel,
    /// Mean squared error of the returned model over the training samples.
    pub final_loss: f64,
    /// Mean of the per-sample losses seen during each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Plain mini-batch SGD on mean squared error for `setting.epochs` epochs.
///
/// Batches are taken in chronological order without shuffling, so the
/// result depends only on the starting weights and the samples.
pub fn train(model: LstmModel, samples: &[Sample], config: &TrainingConfig) -> Result<TrainingOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::data("no training samples"));
    }
    let mut model = model;
    let rate = model.setting.learning_rate;
    let mut ws = Workspace::new(&model);
    let mut grads = Weights::zeros(model.setting.layers, model.setting.units);
    let mut epoch_losses = Vec::with_capacity(model.setting.epochs);

    for epoch in 0..model.setting.epochs {
        let mut loss_sum = 0.0;
        for batch in samples.chunks(config.batch_size) {
            grads.fill_zero();
            let scale = 2.0 / batch.len() as f64;
            for sample in batch {
                let y = ws
                    .forward(&model.weights, &sample.input)
                    .map_err(|_| Error::Training { epoch })?;
                let err = y - sample.target;
                loss_sum += err * err;
                ws.backward(&model.weights, scale * err, &mut grads);
            }
            let norm_sq: f64 = grads.blocks().iter().flat_map(|b| b.iter()).map(|g| g * g).sum();
            if !norm_sq.is_finite() {
                return Err(Error::Training { epoch });
            }
            let norm = norm_sq.sqrt();
            let step = if norm > config.grad_clip_norm {
                rate * config.grad_clip_norm / norm
            } else {
                rate
            };
            for (w, g) in model.weights.blocks_mut().into_iter().zip(grads.blocks()) {
                for (wv, gv) in w.iter_mut().zip(g) {
                    *wv -= step * gv;
                }
            }
        }
        let epoch_loss = loss_sum / samples.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Training { epoch });
        }
        epoch_losses.push(epoch_loss);
    }

    let final_loss = mean_squared_error(&model, &mut ws, samples).map_err(|_| Error::Training {
        epoch: model.setting.epochs,
    })?;
    if !final_loss.is_finite() {
        return Err(Error::Training {
            epoch: model.setting.epochs,
        });
    }
    Ok(TrainingOutcome {
        model,
        final_loss,
        epoch_losses,
    })
}

fn mean_squared_error(model: &LstmModel, ws: &mut Workspace, samples: &[Sample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let e = ws.forward(&model.weights, &s.input)? - s.target;
        sum += e * e;
    }
    Ok(sum / samples.len() as f64)
}

fn sample_loss(model: &LstmModel, ws: &mut Workspace, sample: &Sample) -> Result<f64> {
    let e = ws.forward(&model.weights, &sample.input)? - sample.target;
    Ok(e * e)
}

/// Largest relative disagreement between the backpropagated gradient of
/// the squared error on `sample` and a central finite difference with step
/// `1e-5`, over every parameter.
pub fn gradient_check(model: &LstmModel, sample: &Sample) -> Result<f64> {
    const STEP: f64 = 1e-5;
    let mut ws = Workspace::new(model);
    let y = ws.forward(&model.weights, &sample.input)?;
    let mut analytic = Weights::zeros(model.setting.layers, model.setting.units);
    ws.backward(&model.weights, 2.0 * (y - sample.target), &mut analytic);
    let analytic = analytic.to_vec();

    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    let block_lens: Vec<usize> = model.weights.blocks().iter().map(|b| b.len()).collect();
    for (b, len) in block_lens.into_iter().enumerate() {
        for k in 0..len {
            let original = probe.weights.blocks()[b][k];
            probe.weights.blocks_mut()[b][k] = original + STEP;
            let plus = sample_loss(&probe, &mut ws, sample)?;
            probe.weights.blocks_mut()[b][k] = original - STEP;
            let minus = sample_loss(&probe, &mut ws, sample)?;
            probe.weights.blocks_mut()[b][k] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            flat += 1;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::window;
    use crate::lstm::{init_model, HyperparameterSetting};
    use crate::nmm::{Axis, GridSpec};

    fn setting(lr: f64, layers: usize, units: usize, epochs: usize) -> HyperparameterSetting {
        HyperparameterSetting {
            learning_rate: lr,
            layers,
            units,
            epochs,
        }
    }

    fn grid_with_zero_epochs() -> GridSpec {
        GridSpec {
            epochs: Axis::new(0.0, 50.0, 5.0),
            ..GridSpec::production()
        }
    }

    #[test]
    fn constant_series_is_learned() {
        let c = 0.8;
        let samples = window(&[c; 200], 4).unwrap();
        let m = init_model(&setting(0.05, 1, 2, 50), &grid_with_zero_epochs(), 4, 70.0, 3).unwrap();
        let out = train(m, &samples, &TrainingConfig::default()).unwrap();
        for pair in out.epoch_losses[..10].windows(2) {
            assert!(pair[1] < pair[0], "{:?}", &out.epoch_losses[..10]);
        }
        let pred = out.model.predict(&[c; 4]).unwrap();
        assert!((pred - c).abs() < 0.01, "prediction {pred}");
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let samples = window(&[0.5, 0.6, 0.7, 0.8, 0.9, 1.0], 4).unwrap();
        let m = init_model(&setting(0.1, 1, 2, 0), &grid_with_zero_epochs(), 4, 70.0, 3).unwrap();
        let out = train(m.clone(), &samples, &TrainingConfig::default()).unwrap();
        assert_eq!(out.model, m);
        assert!(out.epoch_losses.is_empty());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let series: Vec<f64> = (0..120).map(|k| 0.6 + 0.3 * ((k as f64) / 9.0).sin()).collect();
        let samples = window(&series, 6).unwrap();
        let m = init_model(&setting(0.05, 2, 4, 10), &GridSpec::test_profile(), 6, 70.0, 8).unwrap();
        let a = train(m.clone(), &samples, &TrainingConfig::default()).unwrap();
        let b = train(m, &samples, &TrainingConfig::default()).unwrap();
        let (wa, wb) = (a.model.weights.to_vec(), b.model.weights.to_vec());
        assert!(wa.iter().zip(&wb).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
    }

    #[test]
    fn self_targets_do_not_raise_loss() {
        let series: Vec<f64> = (0..80).map(|k| 0.5 + 0.2 * ((k as f64) / 5.0).cos()).collect();
        let m = init_model(&setting(0.05, 1, 4, 5), &GridSpec::test_profile(), 4, 70.0, 2).unwrap();
        let mut samples = window(&series, 4).unwrap();
        for s in &mut samples {
            s.target = m.predict(&s.input).unwrap();
        }
        let out = train(m, &samples, &TrainingConfig::default()).unwrap();
        assert!(out.final_loss < 1e-20, "{}", out.final_loss);
    }

    #[test]
    fn divergence_is_a_training_error() {
        let mut m = init_model(&setting(0.2, 1, 2, 5), &GridSpec::test_profile(), 2, 70.0, 1).unwrap();
        m.weights.output_weights[0] = f64::MAX;
        let samples = window(&[1e300, 1e300, 1e300, 1e300], 2).unwrap();
        let err = train(m, &samples, &TrainingConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Training { epoch: 0 }));
    }

    #[test]
    fn gradient_check_small_models() {
        let sample = Sample {
            input: vec![0.2, 0.9, 0.4, 0.7],
            target: 1.3,
        };
        let m = init_model(&setting(0.01, 1, 2, 100), &GridSpec::production(), 4, 70.0, 7).unwrap();
        assert!(gradient_check(&m, &sample).unwrap() < 1e-4);

        let sample6 = Sample {
            input: vec![0.2, 0.9, 0.4, 0.7, 0.1, 0.5],
            target: 1.3,
        };
        let m = init_model(&setting(0.01, 2, 4, 100), &GridSpec::production(), 6, 70.0, 7).unwrap();
        assert!(gradient_check(&m, &sample6).unwrap() < 1e-4);
    }

    #[test]
    fn zero_model_output_bias_gradient() {
        let m = crate::lstm::LstmModel::zeroed(setting(0.01, 1, 2, 100), 3, 70.0);
        let sample = Sample {
            input: vec![0.0; 3],
            target: 0.75,
        };
        let mut ws = Workspace::new(&m);
        let y = ws.forward(&m.weights, &sample.input).unwrap();
        assert_eq!(y, 0.0);
        let mut g = Weights::zeros(1, 2);
        ws.backward(&m.weights, 2.0 * (y - sample.target), &mut g);
        // d/db (b - t)^2 at b = 0
        assert_eq!(g.output_bias, -1.5);
        let mut probe = m.clone();
        probe.weights.output_bias = 1e-5;
        let plus = (probe.predict(&sample.input).unwrap() - 0.75).powi(2);
        probe.weights.output_bias = -1e-5;
        let minus = (probe.predict(&sample.input).unwrap() - 0.75).powi(2);
        let fd = (plus - minus) / 2e-5;
        assert!((fd - g.output_bias).abs() < 1e-8);
        assert!(gradient_check(&m, &sample).unwrap() < 1e-4);
    }
}
