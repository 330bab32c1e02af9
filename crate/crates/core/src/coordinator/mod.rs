//! The master: walks detectors in input order, shares a model whenever a
//! detector's pattern is close to one already in the registry, and farms the
//! rest out as customization jobs.

mod pool;
mod registry;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use pool::{Executor, JobId, LocalPool};
pub use registry::{registry_load, registry_save, Registry, REGISTRY_FORMAT_VERSION};

use crate::customizer::{self, CustomizationJob, CustomizationResult};
use crate::data::{self, DatasetSplit, SpeedSeries};
use crate::error::{Error, Result};
use crate::lstm::{self, HyperparameterSetting, LstmModel, TrainingConfig};
use crate::metrics::{self, AggregateReport, DetectorEvaluation};
use crate::netproto::RemoteDispatcher;
use crate::nmm::{GridSpec, NmmConfig, SearchTrace, Termination};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Mode {
    Local,
    /// Wait on `listen` for `workers` remote workers to connect.
    Distributed {
        listen: String,
        accept_timeout_secs: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub sharing_enabled: bool,
    pub workers: usize,
    pub thd_aard: f64,
    pub thd_aare: f64,
    pub f: f64,
    pub window_length: usize,
    pub train_days: usize,
    pub test_days: usize,
    pub validation_fraction: f64,
    pub grid: GridSpec,
    pub nmm: NmmConfig,
    pub training: TrainingConfig,
    pub run_seed: u64,
    pub mode: Mode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sharing_enabled: true,
            workers: 1,
            thd_aard: 0.1,
            thd_aare: 0.05,
            f: 70.0,
            window_length: 12,
            train_days: 5,
            test_days: 1,
            validation_fraction: 0.2,
            grid: GridSpec::production(),
            nmm: NmmConfig::default(),
            training: TrainingConfig::default(),
            run_seed: 0,
            mode: Mode::Local,
        }
    }
}

impl RunConfig {
    /// Reduced epoch axis and search budget for quick runs.
    pub fn test_profile() -> Self {
        RunConfig {
            grid: GridSpec::test_profile(),
            nmm: NmmConfig::test_profile(),
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("worker count must be at least 1"));
        }
        // A zero AARD threshold is allowed: it simply never matches.
        if !(self.thd_aard >= 0.0 && self.thd_aard.is_finite()) {
            return Err(Error::config(format!("invalid AARD threshold {}", self.thd_aard)));
        }
        if !(self.thd_aare > 0.0 && self.thd_aare.is_finite()) {
            return Err(Error::config(format!("invalid AARE threshold {}", self.thd_aare)));
        }
        if !(self.f > 0.0 && self.f.is_finite()) {
            return Err(Error::config(format!(
                "invalid normalization constant {}",
                self.f
            )));
        }
        if self.window_length == 0 {
            return Err(Error::config("window length must be at least 1"));
        }
        self.grid.validate()?;
        self.nmm.validate()?;
        self.training.validate()
    }
}

/// One member of the registry `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistryMember {
    pub detector_id: String,
    /// Normalized training span used for pattern comparison.
    pub span: Vec<f64>,
}

/// Detectors owning a customized model, in append order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectorRegistry {
    members: Vec<RegistryMember>,
}

impl DetectorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn members(&self) -> &[RegistryMember] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn append(&mut self, detector_id: &str, span: Vec<f64>) {
        self.members.push(RegistryMember {
            detector_id: detector_id.to_string(),
            span,
        });
    }

    /// First member, in append order, whose AARD against `span` is below
    /// `thd_aard`, with that AARD.
    pub fn first_match(&self, span: &[f64], thd_aard: f64) -> Result<Option<(&RegistryMember, f64)>> {
        for m in &self.members {
            let d = metrics::aard(span, &m.span)?;
            if d < thd_aard {
                return Ok(Some((m, d)));
            }
        }
        Ok(None)
    }

    /// Pairs `(earlier, later)` of members closer than `thd_aard`, measured
    /// with the later member as the new detector. Empty when the registry is
    /// well separated.
    pub fn separation_violations(&self, thd_aard: f64) -> Result<Vec<(String, String, f64)>> {
        let mut out = Vec::new();
        for (j, later) in self.members.iter().enumerate() {
            for earlier in &self.members[..j] {
                let d = metrics::aard(&later.span, &earlier.span)?;
                if d < thd_aard {
                    out.push((earlier.detector_id.clone(), later.detector_id.clone(), d));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Share { donor_id: String, aard: f64 },
    Customize,
}

/// Decide what to do with one detector. A detector that gets customized is
/// appended to `registry` immediately, before any training happens.
pub fn process_detector(
    detector_id: &str,
    span: &[f64],
    registry: &mut DetectorRegistry,
    config: &RunConfig,
) -> Result<Decision> {
    if config.sharing_enabled {
        if let Some((donor, aard)) = registry.first_match(span, config.thd_aard)? {
            return Ok(Decision::Share {
                donor_id: donor.detector_id.clone(),
                aard,
            });
        }
    }
    registry.append(detector_id, span.to_vec());
    Ok(Decision::Customize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentKind {
    Owned,
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAssignment {
    pub detector_id: String,
    pub kind: AssignmentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_aard: Option<f64>,
}

impl ModelAssignment {
    pub fn owned(detector_id: &str) -> Self {
        ModelAssignment {
            detector_id: detector_id.to_string(),
            kind: AssignmentKind::Owned,
            donor_id: None,
            matched_aard: None,
        }
    }

    pub fn shared(detector_id: &str, donor_id: &str, aard: f64) -> Self {
        ModelAssignment {
            detector_id: detector_id.to_string(),
            kind: AssignmentKind::Shared,
            donor_id: Some(donor_id.to_string()),
            matched_aard: Some(aard),
        }
    }

    /// Detector whose model this assignment resolves to.
    pub fn model_owner(&self) -> &str {
        self.donor_id.as_deref().unwrap_or(&self.detector_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub detectors_processed: usize,
    pub models_customized: usize,
}

/// Running count of owned models against detectors processed.
pub fn model_count_curve(assignments: &[ModelAssignment]) -> Vec<CurvePoint> {
    let mut owned = 0;
    assignments
        .iter()
        .enumerate()
        .map(|(k, a)| {
            if a.kind == AssignmentKind::Owned {
                owned += 1;
            }
            CurvePoint {
                detectors_processed: k + 1,
                models_customized: owned,
            }
        })
        .collect()
}

/// Outcome of one customization job as it appears in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomizationSummary {
    pub detector_id: String,
    pub best_setting: HyperparameterSetting,
    #[serde(with = "crate::float_serde")]
    pub validation_aare: f64,
    pub converged: bool,
    pub evaluations: usize,
    pub termination: Termination,
    pub wall_time_secs: f64,
    pub trace: SearchTrace,
}

impl From<&CustomizationResult> for CustomizationSummary {
    fn from(r: &CustomizationResult) -> Self {
        CustomizationSummary {
            detector_id: r.detector_id.clone(),
            best_setting: r.best_setting,
            validation_aare: r.validation_aare,
            converged: r.converged,
            evaluations: r.evaluations,
            termination: r.trace.termination,
            wall_time_secs: r.wall_time_secs,
            trace: r.trace.clone(),
        }
    }
}

/// Per-detector view: which model it uses and how that model does on the
/// detector's own validation segment. No threshold is enforced for
/// borrowers; the flag is the owner's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorStatus {
    pub detector_id: String,
    pub model_owner: String,
    #[serde(with = "crate::float_serde")]
    pub validation_aare: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub makespan_seconds: f64,
    pub models_customized: usize,
    pub detectors: usize,
    pub model_count_curve: Vec<CurvePoint>,
    /// In processing order, which is input order.
    pub assignments: Vec<ModelAssignment>,
    /// Over the test segment of every detector.
    pub aggregate: AggregateReport,
    pub detector_status: Vec<DetectorStatus>,
    pub customizations: Vec<CustomizationSummary>,
}

impl RunReport {
    /// Copy with every wall-clock measurement zeroed, for comparing runs.
    pub fn without_timings(&self) -> RunReport {
        let mut r = self.clone();
        r.makespan_seconds = 0.0;
        for c in &mut r.customizations {
            c.wall_time_secs = 0.0;
        }
        r
    }

    pub fn non_converged(&self) -> impl Iterator<Item = &CustomizationSummary> {
        self.customizations.iter().filter(|c| !c.converged)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: RunReport,
    pub registry: Registry,
}

/// Normalize and split every detector, rejecting inconsistent inputs.
pub fn prepare(detectors: &[SpeedSeries], config: &RunConfig) -> Result<Vec<DatasetSplit>> {
    let Some(first) = detectors.first() else {
        return Err(Error::data("no detectors to process"));
    };
    let mut ids = HashSet::new();
    detectors
        .iter()
        .map(|s| {
            if !ids.insert(s.detector_id.as_str()) {
                return Err(Error::data("detector listed twice").for_detector(&s.detector_id));
            }
            if s.values.len() != first.values.len() {
                return Err(Error::data(format!(
                    "series has {} points, {} expected",
                    s.values.len(),
                    first.values.len()
                ))
                .for_detector(&s.detector_id));
            }
            let n = data::normalize(s, config.f).map_err(|e| e.for_detector(&s.detector_id))?;
            data::split(
                &n,
                config.train_days,
                config.test_days,
                config.validation_fraction,
            )
            .map_err(|e| e.for_detector(&s.detector_id))
        })
        .collect()
}

/// The customization job for one detector under `config`.
pub fn job_for(split: &DatasetSplit, config: &RunConfig) -> CustomizationJob {
    let id = split.train.detector_id.clone();
    let seed = customizer::job_seed(config.run_seed, &id);
    CustomizationJob {
        detector_id: id,
        split: split.clone(),
        window_length: config.window_length,
        f: config.f,
        grid: config.grid,
        nmm: NmmConfig {
            target_value: config.thd_aare,
            ..config.nmm
        },
        training: TrainingConfig {
            seed,
            ..config.training
        },
        seed,
    }
}

/// Run with the executor `config.mode` calls for.
pub fn run(detectors: &[SpeedSeries], config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    match &config.mode {
        Mode::Local => run_with(detectors, config, &mut LocalPool::new(config.workers)?),
        Mode::Distributed {
            listen,
            accept_timeout_secs,
        } => {
            let mut dispatcher = RemoteDispatcher::bind(listen.as_str())?;
            log::info!(
                "waiting for {} workers on {}",
                config.workers,
                dispatcher.local_addr()?
            );
            dispatcher.accept_workers(config.workers, Duration::from_secs(*accept_timeout_secs))?;
            let out = run_with(detectors, config, &mut dispatcher);
            dispatcher.shutdown();
            out
        }
    }
}

/// Run the sharing walk, dispatching jobs to `executor`.
pub fn run_with(
    detectors: &[SpeedSeries],
    config: &RunConfig,
    executor: &mut dyn Executor,
) -> Result<RunOutput> {
    config.validate()?;
    let splits = prepare(detectors, config)?;

    let started = Instant::now();
    let mut registry = DetectorRegistry::new();
    let mut assignments = Vec::with_capacity(splits.len());
    let mut pending: HashMap<JobId, String> = HashMap::new();
    for (k, split) in splits.iter().enumerate() {
        let id = &split.train.detector_id;
        let span = split.training_span();
        match process_detector(id, &span, &mut registry, config).map_err(|e| e.for_detector(id))? {
            Decision::Share { donor_id, aard } => {
                log::debug!("{id} shares the model of {donor_id} (AARD {aard:.4})");
                assignments.push(ModelAssignment::shared(id, &donor_id, aard));
            }
            Decision::Customize => {
                log::debug!("{id} gets its own model");
                let job_id = k as JobId;
                executor.submit(job_id, job_for(split, config))?;
                pending.insert(job_id, id.clone());
                assignments.push(ModelAssignment::owned(id));
            }
        }
    }

    let mut results: BTreeMap<String, CustomizationResult> = BTreeMap::new();
    while !pending.is_empty() {
        let (job_id, result) = executor.recv()?;
        let Some(id) = pending.remove(&job_id) else {
            return Err(Error::Protocol(format!("unexpected result for job {job_id}")));
        };
        if result.detector_id != id {
            return Err(Error::Protocol(format!(
                "job {job_id} was for {id}, result is for {}",
                result.detector_id
            )));
        }
        log::info!(
            "{id}: {} after {} evaluations, validation AARE {:.4}",
            result.best_setting,
            result.evaluations,
            result.validation_aare
        );
        results.insert(id, result);
    }
    let makespan_seconds = started.elapsed().as_secs_f64();

    let models: BTreeMap<String, LstmModel> = results
        .iter()
        .map(|(id, r)| (id.clone(), r.model.clone()))
        .collect();
    let customizations = assignments
        .iter()
        .filter_map(|a| results.get(&a.detector_id))
        .map(CustomizationSummary::from)
        .collect();

    let mut evaluations = Vec::with_capacity(splits.len());
    let mut detector_status = Vec::with_capacity(splits.len());
    for (a, split) in assignments.iter().zip(&splits) {
        let owner = a.model_owner();
        let model = &models[owner];
        let id = &a.detector_id;
        let report = lstm::evaluate(model, &split.test.values).map_err(|e| e.for_detector(id))?;
        evaluations.push(DetectorEvaluation {
            detector_id: id.clone(),
            report,
        });
        let validation = lstm::evaluate(model, &split.validation.values).map_err(|e| e.for_detector(id))?;
        detector_status.push(DetectorStatus {
            detector_id: id.clone(),
            model_owner: owner.to_string(),
            validation_aare: validation.aare,
            converged: results[owner].converged,
        });
    }

    let registry = Registry {
        config: config.clone(),
        assignments: assignments.clone(),
        models,
    };
    registry.check()?;
    let report = RunReport {
        makespan_seconds,
        models_customized: registry.models.len(),
        detectors: assignments.len(),
        model_count_curve: model_count_curve(&assignments),
        assignments,
        aggregate: metrics::aggregate(evaluations)?,
        detector_status,
        customizations,
    };
    Ok(RunOutput { report, registry })
}

/// Evaluate every detector of `registry` on its own test segment of
/// `detectors`.
pub fn evaluate_registry(registry: &Registry, detectors: &[SpeedSeries]) -> Result<AggregateReport> {
    let splits = prepare(detectors, &registry.config)?;
    let by_id: HashMap<&str, &DatasetSplit> =
        splits.iter().map(|s| (s.train.detector_id.as_str(), s)).collect();
    let mut out = Vec::with_capacity(registry.assignments.len());
    for a in &registry.assignments {
        let split = by_id
            .get(a.detector_id.as_str())
            .ok_or_else(|| Error::data("not present in the data").for_detector(&a.detector_id))?;
        let model = registry
            .model_for(&a.detector_id)
            .ok_or_else(|| Error::Integrity(format!("no model resolves for {}", a.detector_id)))?;
        out.push(DetectorEvaluation {
            detector_id: a.detector_id.clone(),
            report: lstm::evaluate(model, &split.test.values).map_err(|e| e.for_detector(&a.detector_id))?,
        });
    }
    metrics::aggregate(out)
}
