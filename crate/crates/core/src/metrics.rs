//! Pattern-similarity and forecast-error measures.
//!
//! All sums run in index order in double precision. Denominators that can
//! reach zero (stopped traffic) are clamped to a small floor instead of
//! dropping terms, so the averaging count is always the full length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator floor for normalized speed ratios.
pub const AARD_EPSILON: f64 = 1e-3;
/// Denominator floor for speeds in mph.
pub const AARE_EPSILON_MPH: f64 = 0.1;

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::data(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::data("no points to compare"));
    }
    Ok(())
}

/// Average absolute relative difference between the pattern of a new
/// detector (`new`) and a known one (`known`).
///
/// The denominator is always taken from `new`, so the measure is not
/// symmetric.
pub fn aard(new: &[f64], known: &[f64]) -> Result<f64> {
    check_lengths(new, known)?;
    let mut sum = 0.0;
    for (n, k) in new.iter().zip(known) {
        sum += (n - k).abs() / n.max(AARD_EPSILON);
    }
    Ok(sum / new.len() as f64)
}

/// Average absolute relative error of `forecast` against `actual` (mph).
pub fn aare(actual: &[f64], forecast: &[f64]) -> Result<f64> {
    check_lengths(actual, forecast)?;
    let mut sum = 0.0;
    for (s, p) in actual.iter().zip(forecast) {
        sum += (s - p).abs() / s.max(AARE_EPSILON_MPH);
    }
    Ok(sum / actual.len() as f64)
}

/// Average absolute error in mph.
pub fn aae(actual: &[f64], forecast: &[f64]) -> Result<f64> {
    check_lengths(actual, forecast)?;
    let mut sum = 0.0;
    for (s, p) in actual.iter().zip(forecast) {
        sum += (s - p).abs();
    }
    Ok(sum / actual.len() as f64)
}

/// Root-mean-square error in mph.
pub fn rmse(actual: &[f64], forecast: &[f64]) -> Result<f64> {
    check_lengths(actual, forecast)?;
    let mut sum = 0.0;
    for (s, p) in actual.iter().zip(forecast) {
        let e = s - p;
        sum += e * e;
    }
    Ok((sum / actual.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub aare: f64,
    pub aae: f64,
    pub rmse: f64,
    /// Number of compared points.
    pub points: usize,
}

impl EvaluationReport {
    pub fn compute(actual: &[f64], forecast: &[f64]) -> Result<Self> {
        Ok(EvaluationReport {
            aare: aare(actual, forecast)?,
            aae: aae(actual, forecast)?,
            rmse: rmse(actual, forecast)?,
            points: actual.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorEvaluation {
    pub detector_id: String,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub average_aare: f64,
    pub average_aae: f64,
    pub average_rmse: f64,
    pub detectors: usize,
    pub per_detector: Vec<DetectorEvaluation>,
}

/// Arithmetic means of per-detector AARE, AAE, and RMSE.
pub fn aggregate(per_detector: Vec<DetectorEvaluation>) -> Result<AggregateReport> {
    if per_detector.is_empty() {
        return Err(Error::data("cannot aggregate zero detectors"));
    }
    let z = per_detector.len() as f64;
    let (mut aare_sum, mut aae_sum, mut rmse_sum) = (0.0, 0.0, 0.0);
    for d in &per_detector {
        aare_sum += d.report.aare;
        aae_sum += d.report.aae;
        rmse_sum += d.report.rmse;
    }
    Ok(AggregateReport {
        average_aare: aare_sum / z,
        average_aae: aae_sum / z,
        average_rmse: rmse_sum / z,
        detectors: per_detector.len(),
        per_detector,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    #[test]
    fn aard_hand_cases() {
        assert_eq!(aard(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!(close(aard(&[0.5, 1.0], &[0.6, 0.9]).unwrap(), 0.15));
        assert_eq!(aard(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn aard_is_one_sided() {
        let a = [0.5, 1.0];
        let b = [0.6, 0.9];
        let ab = aard(&a, &b).unwrap();
        let ba = aard(&b, &a).unwrap();
        assert!((ab - ba).abs() > 1e-3);
    }

    #[test]
    fn aard_zero_denominator_is_clamped() {
        // |0 - 0.01| / 1e-3 = 10, averaged over two points.
        assert!(close(aard(&[0.0, 1.0], &[0.01, 1.0]).unwrap(), 5.0));
    }

    #[test]
    fn aare_hand_cases() {
        assert_eq!(aare(&[60.0, 70.0], &[60.0, 70.0]).unwrap(), 0.0);
        assert!(close(aare(&[60.0, 70.0], &[63.0, 70.0]).unwrap(), 0.025));
        assert!(close(aare(&[50.0], &[55.0]).unwrap(), 0.1));
    }

    #[test]
    fn aae_and_rmse_hand_cases() {
        assert!(close(aae(&[60.0, 70.0], &[63.0, 66.0]).unwrap(), 3.5));
        assert_eq!(aae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(aae(&[0.0], &[5.0]).unwrap(), 5.0);
        assert!((rmse(&[60.0, 70.0], &[63.0, 66.0]).unwrap() - 3.5355).abs() < 1e-4);
        assert!(close(rmse(&[60.0, 70.0], &[63.0, 66.0]).unwrap(), 12.5f64.sqrt()));
        assert_eq!(rmse(&[4.0], &[4.0]).unwrap(), 0.0);
        // constant error magnitude
        assert!(close(
            rmse(&[10.0, 20.0, 30.0], &[12.0, 18.0, 32.0]).unwrap(),
            2.0
        ));
        assert!(close(aae(&[10.0, 20.0, 30.0], &[12.0, 18.0, 32.0]).unwrap(), 2.0));
    }

    #[test]
    fn length_mismatch_and_empty_inputs_are_data_errors() {
        assert!(matches!(aard(&[1.0], &[1.0, 2.0]), Err(Error::Data(_))));
        assert!(matches!(aare(&[], &[]), Err(Error::Data(_))));
        assert!(matches!(aae(&[1.0, 2.0], &[1.0]), Err(Error::Data(_))));
        assert!(matches!(rmse(&[], &[]), Err(Error::Data(_))));
    }

    #[test]
    fn aggregate_means() {
        let r = |aare| DetectorEvaluation {
            detector_id: "d".into(),
            report: EvaluationReport {
                aare,
                aae: 1.0,
                rmse: 2.0,
                points: 3,
            },
        };
        let agg = aggregate(vec![r(0.02), r(0.04)]).unwrap();
        assert!(close(agg.average_aare, 0.03));
        assert_eq!(agg.detectors, 2);
        let single = aggregate(vec![r(0.07)]).unwrap();
        assert_eq!(single.average_aare, 0.07);
        assert_eq!(single.average_rmse, 2.0);
        assert!(matches!(aggregate(vec![]), Err(Error::Data(_))));
    }
}
