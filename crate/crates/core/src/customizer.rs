//! Worker-side customization: tune and train one detector's LSTM.
//!
//! The objective of a grid vertex is the AARE, on the validation segment,
//! of a model initialized and trained on the training segment under that
//! vertex. A vertex whose training fails scores `+∞`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::lstm::{self, HyperparameterSetting, LstmModel, TrainingConfig};
use crate::nmm::{self, GridSpec, NmmConfig, SearchTrace};

/// Everything a worker needs to customize one detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomizationJob {
    pub detector_id: String,
    pub split: DatasetSplit,
    pub window_length: usize,
    pub f: f64,
    pub grid: GridSpec,
    pub nmm: NmmConfig,
    pub training: TrainingConfig,
    pub seed: u64,
}

impl CustomizationJob {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.nmm.validate()?;
        self.training.validate()?;
        if !(self.f > 0.0 && self.f.is_finite()) {
            return Err(Error::config(format!(
                "normalization constant must be positive, got {}",
                self.f
            )));
        }
        for (name, seg) in [
            ("train", &self.split.train),
            ("validation", &self.split.validation),
            ("test", &self.split.test),
        ] {
            if seg.values.len() <= self.window_length {
                return Err(Error::data(format!(
                    "{name} segment of {} points is too short for window {}",
                    seg.values.len(),
                    self.window_length
                )));
            }
        }
        Ok(())
    }

    /// Start vertex of the search, pulled onto this job's grid.
    pub fn predefined_vertex(&self) -> HyperparameterSetting {
        self.grid.project(HyperparameterSetting::PREDEFINED.as_array())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomizationResult {
    pub detector_id: String,
    pub best_setting: HyperparameterSetting,
    pub model: LstmModel,
    #[serde(with = "crate::float_serde")]
    pub validation_aare: f64,
    pub converged: bool,
    pub evaluations: usize,
    pub wall_time_secs: f64,
    pub trace: SearchTrace,
}

impl CustomizationResult {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &CustomizationResult) -> bool {
        CustomizationResult {
            wall_time_secs: 0.0,
            ..self.clone()
        } == CustomizationResult {
            wall_time_secs: 0.0,
            ..other.clone()
        }
    }
}

/// Stable 64-bit FNV-1a hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed of a detector's job, independent of the other detectors in a run.
pub fn job_seed(run_seed: u64, detector_id: &str) -> u64 {
    data::mix64(run_seed ^ data::mix64(fnv1a(detector_id.as_bytes())))
}

/// Seed of the weight initialization for one vertex of one job.
pub fn model_seed(job_seed: u64, setting: &HyperparameterSetting) -> u64 {
    [
        setting.learning_rate.to_bits(),
        setting.layers as u64,
        setting.units as u64,
        setting.epochs as u64,
    ]
    .into_iter()
    .fold(job_seed, |acc, v| data::mix64(acc ^ v))
}

/// The search objective for one job. Keeps the best model trained so far so
/// the winner does not have to be trained twice.
pub struct Objective<'a> {
    job: &'a CustomizationJob,
    samples: Vec<Sample>,
    best: Option<(f64, HyperparameterSetting, LstmModel)>,
    trainings: usize,
}

impl<'a> Objective<'a> {
    pub fn new(job: &'a CustomizationJob) -> Result<Self> {
        job.validate()?;
        Ok(Objective {
            job,
            samples: data::window(&job.split.train.values, job.window_length)?,
            best: None,
            trainings: 0,
        })
    }

    fn train_at(&mut self, setting: &HyperparameterSetting) -> Result<LstmModel> {
        self.trainings += 1;
        let job = self.job;
        let model = lstm::init_model(
            setting,
            &job.grid,
            job.window_length,
            job.f,
            model_seed(job.seed, setting),
        )?;
        Ok(lstm::train(model, &self.samples, &job.training)?.model)
    }

    /// Validation AARE of a model trained under `setting`, or `+∞` when
    /// training fails.
    pub fn value(&mut self, setting: &HyperparameterSetting) -> f64 {
        let model = match self.train_at(setting) {
            Ok(m) => m,
            Err(e) => {
                log::debug!("{}: {setting} failed: {e}", self.job.detector_id);
                return f64::INFINITY;
            }
        };
        let aare = match lstm::evaluate(&model, &self.job.split.validation.values) {
            Ok(r) if r.aare.is_finite() => r.aare,
            _ => return f64::INFINITY,
        };
        if self.best.as_ref().is_none_or(|(v, _, _)| aare < *v) {
            self.best = Some((aare, *setting, model));
        }
        aare
    }

    /// Number of trainings run so far.
    pub fn trainings(&self) -> usize {
        self.trainings
    }

    /// Model for `setting`: the cached winner when it matches, otherwise a
    /// fresh deterministic training; an untrained model if training fails.
    pub fn model_for(&mut self, setting: &HyperparameterSetting) -> Result<LstmModel> {
        if let Some((_, s, m)) = &self.best {
            if s == setting {
                return Ok(m.clone());
            }
        }
        match self.train_at(setting) {
            Ok(m) => Ok(m),
            Err(Error::Training { .. }) | Err(Error::Numerical { .. }) => lstm::init_model(
                setting,
                &self.job.grid,
                self.job.window_length,
                self.job.f,
                model_seed(self.job.seed, setting),
            ),
            Err(e) => Err(e),
        }
    }
}

/// Objective closure for a job, as handed to the search.
pub fn objective_for(job: &CustomizationJob) -> Result<impl FnMut(&HyperparameterSetting) -> f64 + '_> {
    let mut objective = Objective::new(job)?;
    Ok(move |s: &HyperparameterSetting| objective.value(s))
}

/// Tune and train the LSTM of one detector until its validation AARE is at
/// most `thd_aare` or the search ends.
pub fn customize(job: &CustomizationJob, thd_aare: f64) -> Result<CustomizationResult> {
    let started = Instant::now();
    let mut objective = Objective::new(job)?;
    let config = NmmConfig {
        target_value: thd_aare,
        ..job.nmm
    };
    let outcome = nmm::minimize(
        |s| objective.value(s),
        &job.predefined_vertex(),
        &job.grid,
        &config,
    )?;
    finish(job, thd_aare, objective, outcome, started)
}

/// Like [`customize`] but searching with an injected objective. The
/// returned model is still trained for real at the chosen vertex.
pub fn customize_with<F>(
    job: &CustomizationJob,
    thd_aare: f64,
    objective_fn: F,
) -> Result<CustomizationResult>
where
    F: FnMut(&HyperparameterSetting) -> f64,
{
    let started = Instant::now();
    let objective = Objective::new(job)?;
    let config = NmmConfig {
        target_value: thd_aare,
        ..job.nmm
    };
    let outcome = nmm::minimize(objective_fn, &job.predefined_vertex(), &job.grid, &config)?;
    finish(job, thd_aare, objective, outcome, started)
}

fn finish(
    job: &CustomizationJob,
    thd_aare: f64,
    mut objective: Objective<'_>,
    outcome: nmm::SearchOutcome,
    started: Instant,
) -> Result<CustomizationResult> {
    let model = objective.model_for(&outcome.best)?;
    let validation_aare = match lstm::evaluate(&model, &job.split.validation.values) {
        Ok(r) => r.aare,
        Err(_) => f64::INFINITY,
    };
    Ok(CustomizationResult {
        detector_id: job.detector_id.clone(),
        best_setting: outcome.best,
        model,
        validation_aare,
        converged: validation_aare <= thd_aare,
        evaluations: outcome.trace.evaluations,
        wall_time_secs: started.elapsed().as_secs_f64(),
        trace: outcome.trace,
    })
}
