//! Nelder-Mead simplex search over the discrete four-dimensional
//! hyperparameter grid.
//!
//! The simplex walks in grid-index coordinates. Every candidate produced by
//! a transformation is clamped and rounded onto the grid before it is
//! evaluated, objective values are memoized per grid point, and the best
//! point ever evaluated is returned.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::HyperparameterSetting;

/// Number of tuned hyperparameters.
pub const DIMENSIONS: usize = 4;

/// Consecutive iterations without a fresh evaluation after which the walk is
/// considered stuck on memoized points.
const STALL_LIMIT: usize = 8;

/// Integer coordinates of a grid point, one per dimension.
pub type GridIndex = [usize; DIMENSIONS];

/// One discrete dimension: `min, min + step, ..., max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Axis {
    pub const fn new(min: f64, max: f64, step: f64) -> Self {
        Axis { min, max, step }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let finite = self.min.is_finite() && self.max.is_finite() && self.step.is_finite();
        if !finite || self.step <= 0.0 || self.min > self.max {
            return Err(Error::config(format!("invalid {name} axis {self:?}")));
        }
        let steps = (self.max - self.min) / self.step;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::config(format!(
                "{name} axis range is not a multiple of its step"
            )));
        }
        if steps.round() < 1.0 {
            return Err(Error::config(format!("{name} axis needs at least two points")));
        }
        Ok(())
    }

    /// Number of grid points on this axis.
    pub fn len(&self) -> usize {
        ((self.max - self.min) / self.step).round() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Value at a grid index, rounded to 12 decimals so that e.g. the third
    /// learning rate is exactly `0.03`.
    pub fn value(&self, index: usize) -> f64 {
        let raw = self.min + index as f64 * self.step;
        (raw * 1e12).round() / 1e12
    }

    /// Continuous index coordinate of a value.
    fn coordinate(&self, value: f64) -> f64 {
        (value - self.min) / self.step
    }

    /// Index of an exactly on-grid value.
    fn index_of(&self, value: f64) -> Option<usize> {
        let coord = self.coordinate(value);
        let rounded = coord.round();
        if (coord - rounded).abs() > 1e-6 || rounded < 0.0 || rounded as usize >= self.len() {
            None
        } else {
            Some(rounded as usize)
        }
    }

    /// Clamp a continuous coordinate into range and round to the nearest
    /// index; exact midpoints round toward the maximum.
    fn snap(&self, coord: f64) -> usize {
        let top = (self.len() - 1) as f64;
        let clamped = if coord.is_nan() {
            0.0
        } else {
            coord.clamp(0.0, top)
        };
        ((clamped + 0.5 + 1e-9).floor() as usize).min(self.len() - 1)
    }
}

/// Domains of the four hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub learning_rate: Axis,
    pub layers: Axis,
    pub units: Axis,
    pub epochs: Axis,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::production()
    }
}

impl GridSpec {
    /// Full search domain: learning rate 0.01..0.2, 1..10 layers,
    /// 2..40 units, 100..1000 epochs.
    pub const fn production() -> Self {
        GridSpec {
            learning_rate: Axis::new(0.01, 0.2, 0.01),
            layers: Axis::new(1.0, 10.0, 1.0),
            units: Axis::new(2.0, 40.0, 2.0),
            epochs: Axis::new(100.0, 1000.0, 20.0),
        }
    }

    /// Reduced epoch domain (5..50) for quick runs.
    pub const fn test_profile() -> Self {
        GridSpec {
            epochs: Axis::new(5.0, 50.0, 5.0),
            ..GridSpec::production()
        }
    }

    pub fn axes(&self) -> [&Axis; DIMENSIONS] {
        [&self.learning_rate, &self.layers, &self.units, &self.epochs]
    }

    pub fn validate(&self) -> Result<()> {
        let names = ["learning-rate", "layers", "units", "epochs"];
        for (axis, name) in self.axes().into_iter().zip(names) {
            axis.validate(name)?;
        }
        Ok(())
    }

    /// Total number of grid points.
    pub fn size(&self) -> usize {
        self.axes().iter().map(|a| a.len()).product()
    }

    pub fn setting_at(&self, index: GridIndex) -> HyperparameterSetting {
        HyperparameterSetting {
            learning_rate: self.learning_rate.value(index[0]),
            layers: self.layers.value(index[1]).round() as usize,
            units: self.units.value(index[2]).round() as usize,
            epochs: self.epochs.value(index[3]).round() as usize,
        }
    }

    /// Grid index of an on-grid setting.
    pub fn index_of(&self, setting: &HyperparameterSetting) -> Result<GridIndex> {
        let values = setting.as_array();
        let mut index = [0; DIMENSIONS];
        for (d, axis) in self.axes().into_iter().enumerate() {
            index[d] = axis
                .index_of(values[d])
                .ok_or_else(|| Error::config(format!("setting {setting} is not on the search grid")))?;
        }
        Ok(index)
    }

    pub fn contains(&self, setting: &HyperparameterSetting) -> bool {
        self.index_of(setting).is_ok()
    }

    /// Nearest in-bounds grid point to an arbitrary point given in
    /// hyperparameter units.
    pub fn project(&self, point: [f64; DIMENSIONS]) -> HyperparameterSetting {
        let mut coords = [0.0; DIMENSIONS];
        for (d, axis) in self.axes().into_iter().enumerate() {
            coords[d] = axis.coordinate(point[d]);
        }
        self.setting_at(self.snap(coords))
    }

    fn snap(&self, coords: [f64; DIMENSIONS]) -> GridIndex {
        let mut index = [0; DIMENSIONS];
        for (d, axis) in self.axes().into_iter().enumerate() {
            index[d] = axis.snap(coords[d]);
        }
        index
    }

    fn in_bounds(&self, d: usize, value: isize) -> bool {
        value >= 0 && (value as usize) < self.axes()[d].len()
    }
}

/// Free-function form of [`GridSpec::project`].
pub fn project_to_grid(point: [f64; DIMENSIONS], grid: &GridSpec) -> HyperparameterSetting {
    grid.project(point)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmmConfig {
    /// Reflection coefficient.
    pub alpha: f64,
    /// Expansion coefficient.
    pub gamma: f64,
    /// Contraction coefficient.
    pub rho: f64,
    /// Shrink coefficient.
    pub sigma: f64,
    /// Stop as soon as an evaluation is at or below this value.
    #[serde(with = "crate::float_serde")]
    pub target_value: f64,
    /// Stop when the sample standard deviation of the simplex values drops
    /// below this.
    pub stddev_tol: f64,
    /// Maximum number of distinct grid points evaluated.
    pub max_evaluations: usize,
}

impl Default for NmmConfig {
    fn default() -> Self {
        NmmConfig {
            alpha: 1.0,
            gamma: 2.0,
            rho: 0.5,
            sigma: 0.5,
            target_value: 0.05,
            stddev_tol: 1e-4,
            max_evaluations: 50,
        }
    }
}

impl NmmConfig {
    /// Budget used with the reduced test grid.
    pub fn test_profile() -> Self {
        NmmConfig {
            max_evaluations: 10,
            ..NmmConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.gamma > 1.0
            && self.rho > 0.0
            && self.rho < 1.0
            && self.sigma > 0.0
            && self.sigma < 1.0
            && self.stddev_tol >= 0.0
            && self.max_evaluations >= 1
            && !self.target_value.is_nan();
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "invalid Nelder-Mead configuration {self:?}"
            )))
        }
    }
}

/// Which transformation produced an evaluated point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Step {
    Initial,
    Reflection,
    Expansion,
    OutsideContraction,
    InsideContraction,
    Shrink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    TargetReached,
    StddevConverged,
    BudgetExhausted,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::TargetReached => "target-reached",
            Termination::StddevConverged => "stddev-converged",
            Termination::BudgetExhausted => "budget-exhausted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub setting: HyperparameterSetting,
    #[serde(with = "crate::float_serde")]
    pub value: f64,
    pub step: Step,
}

/// Record of one search: one entry per fresh (non-memoized) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub entries: Vec<TraceEntry>,
    pub evaluations: usize,
    pub termination: Termination,
}

impl SearchTrace {
    /// One JSON record per line.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).expect("trace entry serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: HyperparameterSetting,
    #[serde(with = "crate::float_serde")]
    pub best_value: f64,
    pub trace: SearchTrace,
}

#[derive(Debug, Clone, Copy)]
struct Vertex {
    index: GridIndex,
    value: f64,
}

/// The five starting vertices: the predefined one, then one neighbor per
/// dimension, one grid step up (or down when already at the maximum).
pub fn initial_simplex(
    predefined: &HyperparameterSetting,
    grid: &GridSpec,
) -> Result<Vec<HyperparameterSetting>> {
    grid.validate()?;
    let base = grid.index_of(predefined)?;
    Ok(initial_indices(base, grid)
        .into_iter()
        .map(|i| grid.setting_at(i))
        .collect())
}

fn initial_indices(base: GridIndex, grid: &GridSpec) -> Vec<GridIndex> {
    let mut out = vec![base];
    for d in 0..DIMENSIONS {
        let mut neighbor = base;
        if base[d] + 1 < grid.axes()[d].len() {
            neighbor[d] += 1;
        } else {
            neighbor[d] -= 1;
        }
        out.push(neighbor);
    }
    out
}

struct Search<'a, F> {
    objective: F,
    grid: &'a GridSpec,
    config: &'a NmmConfig,
    memo: HashMap<GridIndex, f64>,
    entries: Vec<TraceEntry>,
    best: Option<Vertex>,
}

impl<F: FnMut(&HyperparameterSetting) -> f64> Search<'_, F> {
    /// Evaluate a grid point, reusing a memoized value when present.
    fn eval(&mut self, index: GridIndex, step: Step) -> std::result::Result<f64, Termination> {
        if let Some(&v) = self.memo.get(&index) {
            return Ok(v);
        }
        if self.entries.len() >= self.config.max_evaluations {
            return Err(Termination::BudgetExhausted);
        }
        let setting = self.grid.setting_at(index);
        let mut value = (self.objective)(&setting);
        if value.is_nan() {
            value = f64::INFINITY;
        }
        self.memo.insert(index, value);
        self.entries.push(TraceEntry { setting, value, step });
        if self.best.is_none_or(|b| value < b.value) {
            self.best = Some(Vertex { index, value });
        }
        if value <= self.config.target_value {
            return Err(Termination::TargetReached);
        }
        Ok(value)
    }

    /// Replace a candidate that coincides with another simplex vertex by a
    /// neighbor one step up in the lowest dimension that stays in bounds
    /// and is free, falling back to one step down.
    fn repair(&self, candidate: GridIndex, others: &[GridIndex]) -> GridIndex {
        if !others.contains(&candidate) {
            return candidate;
        }
        for delta in [1isize, -1] {
            for d in 0..DIMENSIONS {
                let moved = candidate[d] as isize + delta;
                if !self.grid.in_bounds(d, moved) {
                    continue;
                }
                let mut next = candidate;
                next[d] = moved as usize;
                if !others.contains(&next) {
                    return next;
                }
            }
        }
        candidate
    }

    fn run(&mut self, base: GridIndex) -> Termination {
        match self.walk(base) {
            Ok(never) => match never {},
            Err(t) => t,
        }
    }

    fn walk(&mut self, base: GridIndex) -> std::result::Result<std::convert::Infallible, Termination> {
        let c = *self.config;
        let mut simplex = Vec::with_capacity(DIMENSIONS + 1);
        for index in initial_indices(base, self.grid) {
            let value = self.eval(index, Step::Initial)?;
            simplex.push(Vertex { index, value });
        }

        let mut stalled = 0;
        loop {
            simplex.sort_by(|a, b| a.value.total_cmp(&b.value));
            if sample_stddev(simplex.iter().map(|v| v.value)) < c.stddev_tol {
                return Err(Termination::StddevConverged);
            }
            if stalled >= STALL_LIMIT {
                return Err(Termination::BudgetExhausted);
            }
            let before = self.entries.len();

            let worst = simplex[DIMENSIONS];
            let best_value = simplex[0].value;
            let second_worst_value = simplex[DIMENSIONS - 1].value;
            let others: Vec<GridIndex> = simplex[..DIMENSIONS].iter().map(|v| v.index).collect();

            let mut centroid = [0.0; DIMENSIONS];
            for v in &simplex[..DIMENSIONS] {
                for d in 0..DIMENSIONS {
                    centroid[d] += v.index[d] as f64 / DIMENSIONS as f64;
                }
            }
            let along = |from: [f64; DIMENSIONS], to: [f64; DIMENSIONS], t: f64| {
                let mut p = [0.0; DIMENSIONS];
                for d in 0..DIMENSIONS {
                    p[d] = from[d] + t * (to[d] - from[d]);
                }
                p
            };
            let worst_coords = coords(worst.index);

            let reflected = along(centroid, worst_coords, -c.alpha);
            let r_index = self.repair(self.grid.snap(reflected), &others);
            let r_value = self.eval(r_index, Step::Reflection)?;

            let replacement = if r_value < best_value {
                let expanded = along(centroid, reflected, c.gamma);
                let e_index = self.repair(self.grid.snap(expanded), &others);
                let e_value = self.eval(e_index, Step::Expansion)?;
                if e_value < r_value {
                    Some(Vertex {
                        index: e_index,
                        value: e_value,
                    })
                } else {
                    Some(Vertex {
                        index: r_index,
                        value: r_value,
                    })
                }
            } else if r_value < second_worst_value {
                Some(Vertex {
                    index: r_index,
                    value: r_value,
                })
            } else if r_value < worst.value {
                let contracted = along(centroid, reflected, c.rho);
                let k_index = self.repair(self.grid.snap(contracted), &others);
                let k_value = self.eval(k_index, Step::OutsideContraction)?;
                (k_value <= r_value).then_some(Vertex {
                    index: k_index,
                    value: k_value,
                })
            } else {
                let contracted = along(centroid, worst_coords, c.rho);
                let k_index = self.repair(self.grid.snap(contracted), &others);
                let k_value = self.eval(k_index, Step::InsideContraction)?;
                (k_value < worst.value).then_some(Vertex {
                    index: k_index,
                    value: k_value,
                })
            };

            match replacement {
                Some(v) => simplex[DIMENSIONS] = v,
                None => {
                    let anchor = coords(simplex[0].index);
                    for i in 1..=DIMENSIONS {
                        let shrunk = along(anchor, coords(simplex[i].index), c.sigma);
                        let taken: Vec<GridIndex> = simplex
                            .iter()
                            .enumerate()
                            .filter(|&(j, _)| j != i)
                            .map(|(_, v)| v.index)
                            .collect();
                        let s_index = self.repair(self.grid.snap(shrunk), &taken);
                        let s_value = self.eval(s_index, Step::Shrink)?;
                        simplex[i] = Vertex {
                            index: s_index,
                            value: s_value,
                        };
                    }
                }
            }

            if self.entries.len() == before {
                stalled += 1;
            } else {
                stalled = 0;
            }
        }
    }
}

fn coords(index: GridIndex) -> [f64; DIMENSIONS] {
    let mut p = [0.0; DIMENSIONS];
    for d in 0..DIMENSIONS {
        p[d] = index[d] as f64;
    }
    p
}

/// Sample standard deviation (n − 1 denominator). NaN when any value is
/// infinite, so a simplex holding failed evaluations never counts as
/// converged.
fn sample_stddev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// Minimize `objective` over `grid` starting from `predefined`.
///
/// Evaluations happen one at a time in a fixed order, so the trace is a
/// pure function of the objective, start vertex, grid, and configuration.
pub fn minimize<F>(
    objective: F,
    predefined: &HyperparameterSetting,
    grid: &GridSpec,
    config: &NmmConfig,
) -> Result<SearchOutcome>
where
    F: FnMut(&HyperparameterSetting) -> f64,
{
    grid.validate()?;
    config.validate()?;
    let base = grid.index_of(predefined)?;
    let mut search = Search {
        objective,
        grid,
        config,
        memo: HashMap::new(),
        entries: Vec::new(),
        best: None,
    };
    let termination = search.run(base);
    let best = search.best.expect("at least one evaluation happens");
    Ok(SearchOutcome {
        best: grid.setting_at(best.index),
        best_value: best.value,
        trace: SearchTrace {
            evaluations: search.entries.len(),
            entries: search.entries,
            termination,
        },
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn setting(lr: f64, layers: usize, units: usize, epochs: usize) -> HyperparameterSetting {
        HyperparameterSetting {
            learning_rate: lr,
            layers,
            units,
            epochs,
        }
    }

    fn predefined() -> HyperparameterSetting {
        setting(0.01, 1, 2, 100)
    }

    #[test]
    fn production_grid_has_184000_points() {
        assert_eq!(GridSpec::production().size(), 20 * 10 * 20 * 46);
        assert_eq!(GridSpec::test_profile().epochs.len(), 10);
    }

    #[test]
    fn invalid_axes_are_rejected() {
        let mut g = GridSpec::production();
        g.units = Axis::new(2.0, 41.0, 2.0);
        assert!(matches!(g.validate(), Err(Error::Config(_))));
        g.units = Axis::new(4.0, 2.0, 2.0);
        assert!(g.validate().is_err());
        g.units = Axis::new(2.0, 40.0, 0.0);
        assert!(g.validate().is_err());
    }

    #[test]
    fn initial_simplex_from_predefined_vertex() {
        let s = initial_simplex(&predefined(), &GridSpec::production()).unwrap();
        assert_eq!(
            s,
            vec![
                setting(0.01, 1, 2, 100),
                setting(0.02, 1, 2, 100),
                setting(0.01, 2, 2, 100),
                setting(0.01, 1, 4, 100),
                setting(0.01, 1, 2, 120),
            ]
        );
    }

    #[test]
    fn initial_simplex_steps_down_at_max() {
        let s = initial_simplex(&setting(0.2, 1, 2, 100), &GridSpec::production()).unwrap();
        assert_eq!(s[1], setting(0.19, 1, 2, 100));
        let distinct: HashSet<String> = s.iter().map(|v| v.to_string()).collect();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn initial_simplex_rejects_off_grid_vertex() {
        let r = initial_simplex(&setting(0.015, 1, 2, 100), &GridSpec::production());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn projection_examples() {
        let g = GridSpec::production();
        assert_eq!(g.project([0.014, 1.4, 3.0, 111.0]), setting(0.01, 1, 4, 120));
        assert_eq!(g.project([-5.0, 0.0, 0.0, 0.0]), setting(0.01, 1, 2, 100));
        assert_eq!(g.project([9.0, 99.0, 99.0, 1e9]), setting(0.2, 10, 40, 1000));
        let on = setting(0.07, 3, 18, 460);
        assert_eq!(g.project(on.as_array()), on);
    }

    #[test]
    fn target_at_predefined_vertex_stops_after_one_evaluation() {
        let g = GridSpec::production();
        let config = NmmConfig {
            target_value: 0.05,
            ..NmmConfig::default()
        };
        let out = minimize(|_| 0.05, &predefined(), &g, &config).unwrap();
        assert_eq!(out.trace.evaluations, 1);
        assert_eq!(out.trace.termination, Termination::TargetReached);
        assert_eq!(out.best, predefined());
    }

    #[test]
    fn constant_objective_converges_by_stddev() {
        let g = GridSpec::production();
        let out = minimize(|_| 1.0, &predefined(), &g, &NmmConfig::default()).unwrap();
        assert_eq!(out.trace.termination, Termination::StddevConverged);
        assert_eq!(out.trace.evaluations, 5);
        assert_eq!(out.best_value, 1.0);
    }

    #[test]
    fn all_infinite_simplex_ends_budget_exhausted() {
        let g = GridSpec::production();
        let out = minimize(|_| f64::INFINITY, &predefined(), &g, &NmmConfig::default()).unwrap();
        assert_eq!(out.trace.termination, Termination::BudgetExhausted);
        assert!(out.trace.evaluations <= 50);
        assert_eq!(out.best, predefined());
        assert_eq!(out.best_value, f64::INFINITY);
    }

    #[test]
    fn flat_objective_with_zero_tolerance_ends_budget_exhausted() {
        let g = GridSpec::production();
        let config = NmmConfig {
            stddev_tol: 0.0,
            ..NmmConfig::default()
        };
        let out = minimize(|_| 1.0, &predefined(), &g, &config).unwrap();
        assert_eq!(out.trace.termination, Termination::BudgetExhausted);
        assert_eq!(out.best_value, 1.0);
    }

    #[test]
    fn budget_caps_fresh_evaluations() {
        let g = GridSpec::production();
        let config = NmmConfig {
            max_evaluations: 7,
            target_value: f64::NEG_INFINITY,
            stddev_tol: 0.0,
            ..NmmConfig::default()
        };
        // Decreasing toward the far corner keeps the walk moving.
        let out = minimize(
            |s| -(s.layers as f64) - s.units as f64 - s.epochs as f64 / 100.0 - s.learning_rate * 10.0,
            &predefined(),
            &g,
            &config,
        )
        .unwrap();
        assert_eq!(out.trace.evaluations, 7);
        assert_eq!(out.trace.termination, Termination::BudgetExhausted);
    }

    #[test]
    fn walk_is_memoized_on_grid_and_never_worse_than_start() {
        let g = GridSpec::production();
        let target = [0.13, 6.0, 22.0, 640.0];
        let objective = |s: &HyperparameterSetting| {
            let v = s.as_array();
            (0..4)
                .map(|d| {
                    let a = g.axes()[d];
                    ((v[d] - target[d]) / (a.max - a.min)).powi(2)
                })
                .sum::<f64>()
        };
        let mut calls = Vec::new();
        let out = minimize(
            |s| {
                calls.push(*s);
                objective(s)
            },
            &predefined(),
            &g,
            &NmmConfig {
                target_value: 0.0,
                ..NmmConfig::default()
            },
        )
        .unwrap();
        let distinct: HashSet<String> = calls.iter().map(|s| s.to_string()).collect();
        assert_eq!(distinct.len(), calls.len());
        assert_eq!(calls.len(), out.trace.evaluations);
        assert!(calls.iter().all(|s| g.contains(s)));
        assert!(out.best_value <= objective(&predefined()));
        let min_seen = out
            .trace
            .entries
            .iter()
            .map(|e| e.value)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_value, min_seen);
    }

    #[test]
    fn trace_log_has_one_line_per_evaluation() {
        let g = GridSpec::production();
        let out = minimize(|s| s.layers as f64, &predefined(), &g, &NmmConfig::default()).unwrap();
        let log = out.trace.to_log();
        assert_eq!(log.lines().count(), out.trace.evaluations);
        for line in log.lines() {
            let entry: TraceEntry = serde_json::from_str(line).unwrap();
            assert!(g.contains(&entry.setting));
        }
    }
}
