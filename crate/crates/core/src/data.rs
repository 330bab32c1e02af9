//! Detector speed series: CSV ingestion, normalization, splitting,
//! windowing, and a seeded synthetic generator with verifiable cluster
//! separation.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;

/// Fixed sampling interval of every series, in seconds.
pub const INTERVAL_SECS: i64 = 300;
/// Samples per day at the fixed interval.
pub const POINTS_PER_DAY: usize = 288;

/// Raw speeds (mph) from one detector at a fixed 5-minute cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedSeries {
    pub detector_id: String,
    pub start_time: DateTime<Utc>,
    pub interval_secs: i64,
    pub values: Vec<f64>,
}

impl SpeedSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, index: usize) -> DateTime<Utc> {
        self.start_time + chrono::Duration::seconds(self.interval_secs * index as i64)
    }
}

/// Speeds divided by the normalization constant `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSeries {
    pub detector_id: String,
    pub f: f64,
    pub values: Vec<f64>,
}

impl NormalizedSeries {
    fn slice(&self, start: usize, end: usize) -> NormalizedSeries {
        NormalizedSeries {
            detector_id: self.detector_id.clone(),
            f: self.f,
            values: self.values[start..end].to_vec(),
        }
    }
}

/// Chronological train / validation / test segments of one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: NormalizedSeries,
    pub validation: NormalizedSeries,
    pub test: NormalizedSeries,
}

impl DatasetSplit {
    /// Train and validation segments joined: the span used for pattern
    /// comparison between detectors.
    pub fn training_span(&self) -> Vec<f64> {
        let mut v = self.train.values.clone();
        v.extend_from_slice(&self.validation.values);
        v
    }
}

/// One supervised example: a window of inputs and the value that follows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    detector_id: String,
    timestamp: String,
    speed_mph: Option<String>,
}

/// Read a `detector_id,timestamp,speed_mph` CSV into one series per
/// detector, in order of first appearance.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<SpeedSeries>> {
    let file = File::open(path.as_ref())?;
    read_csv(file)
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<SpeedSeries>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(csv_error(e)),
    };
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let expected = ["detector_id", "timestamp", "speed_mph"];
    if headers.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(DateTime<Utc>, f64)>> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        let row: CsvRow = record.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let timestamp = DateTime::parse_from_rfc3339(row.timestamp.trim())
            .map_err(|e| Error::Parse {
                line,
                message: format!("bad timestamp {:?}: {e}", row.timestamp),
            })?
            .with_timezone(&Utc);
        let raw = row.speed_mph.as_deref().map(str::trim).unwrap_or("");
        if raw.is_empty() {
            return Err(Error::data(format!(
                "missing speed for detector {} at line {line}",
                row.detector_id
            )));
        }
        let speed: f64 = raw.parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad speed {raw:?}"),
        })?;
        if !speed.is_finite() || speed < 0.0 {
            return Err(Error::data(format!(
                "speed {speed} at line {line} must be finite and non-negative"
            )));
        }
        let id = row.detector_id.trim().to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty detector_id".into(),
            });
        }
        rows.entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push((timestamp, speed));
    }

    order
        .into_iter()
        .map(|id| {
            let mut points = rows.remove(&id).expect("grouped id");
            points.sort_by_key(|(t, _)| *t);
            for pair in points.windows(2) {
                let gap = (pair[1].0 - pair[0].0).num_seconds();
                if gap != INTERVAL_SECS {
                    return Err(Error::Cadence {
                        detector_id: id.clone(),
                        before: format_time(pair[0].0),
                        after: format_time(pair[1].0),
                        gap_secs: gap,
                    });
                }
            }
            Ok(SpeedSeries {
                detector_id: id,
                start_time: points[0].0,
                interval_secs: INTERVAL_SECS,
                values: points.into_iter().map(|(_, v)| v).collect(),
            })
        })
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

fn format_time(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Write series in the ingestion CSV schema.
pub fn write_csv<W: Write>(series: &[SpeedSeries], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["detector_id", "timestamp", "speed_mph"])
        .map_err(io)?;
    for s in series {
        for (k, v) in s.values.iter().enumerate() {
            w.write_record([
                s.detector_id.as_str(),
                &format_time(s.timestamp(k)),
                &v.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(series: &[SpeedSeries], path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    write_csv(series, std::io::BufWriter::new(file))
}

fn check_f(f: f64) -> Result<()> {
    if f > 0.0 && f.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "normalization constant must be positive, got {f}"
        )))
    }
}

pub fn normalize(series: &SpeedSeries, f: f64) -> Result<NormalizedSeries> {
    check_f(f)?;
    Ok(NormalizedSeries {
        detector_id: series.detector_id.clone(),
        f,
        values: series.values.iter().map(|v| v / f).collect(),
    })
}

/// Leading `train_days + test_days` days split into train, validation (the
/// trailing `validation_fraction` of the training days), and test.
pub fn split(
    series: &NormalizedSeries,
    train_days: usize,
    test_days: usize,
    validation_fraction: f64,
) -> Result<DatasetSplit> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::config(format!(
            "validation fraction must be in (0, 1), got {validation_fraction}"
        )));
    }
    if train_days == 0 || test_days == 0 {
        return Err(Error::config("train and test spans need at least one day each"));
    }
    let train_span = train_days * POINTS_PER_DAY;
    let needed = train_span + test_days * POINTS_PER_DAY;
    if series.values.len() < needed {
        return Err(Error::data(format!(
            "detector {} has {} points, {needed} needed for {train_days}+{test_days} days",
            series.detector_id,
            series.values.len()
        )));
    }
    let validation_len = (train_span as f64 * validation_fraction).round() as usize;
    if validation_len == 0 || validation_len >= train_span {
        return Err(Error::config("validation fraction leaves an empty segment"));
    }
    let boundary = train_span - validation_len;
    Ok(DatasetSplit {
        train: series.slice(0, boundary),
        validation: series.slice(boundary, train_span),
        test: series.slice(train_span, needed),
    })
}

/// Sliding windows with stride 1: sample `k` maps `values[k..k + w]` to
/// `values[k + w]`.
pub fn window(values: &[f64], window_length: usize) -> Result<Vec<Sample>> {
    if window_length == 0 || values.len() <= window_length {
        return Err(Error::data(format!(
            "segment of length {} is too short for window {window_length}",
            values.len()
        )));
    }
    Ok((0..values.len() - window_length)
        .map(|k| Sample {
            input: values[k..k + window_length].to_vec(),
            target: values[k + window_length],
        })
        .collect())
}

/// Parameters of a synthetic detector population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_detectors: usize,
    pub num_patterns: usize,
    /// Half-width of the uniform noise added to every reading, in mph.
    pub noise_amplitude: f64,
    pub days: usize,
    pub seed: u64,
    /// Minimum zero-noise AARD, in both directions, between any two base
    /// profiles.
    pub min_pattern_gap: f64,
}

impl SyntheticSpec {
    pub fn new(
        num_detectors: usize,
        num_patterns: usize,
        days: usize,
        noise_amplitude: f64,
        seed: u64,
    ) -> Self {
        SyntheticSpec {
            num_detectors,
            num_patterns,
            noise_amplitude,
            days,
            seed,
            min_pattern_gap: 0.12,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_patterns == 0 || self.num_patterns > self.num_detectors {
            return Err(Error::config(format!(
                "need 1 <= patterns <= detectors, got {} patterns for {} detectors",
                self.num_patterns, self.num_detectors
            )));
        }
        if self.days == 0 {
            return Err(Error::config("synthetic data needs at least one day"));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return Err(Error::config("noise amplitude must be finite and non-negative"));
        }
        Ok(())
    }

    /// Base pattern used by detector `index` (round-robin).
    pub fn pattern_of(&self, index: usize) -> usize {
        index % self.num_patterns
    }

    pub fn detector_id(index: usize) -> String {
        format!("det-{index:03}")
    }
}

/// SplitMix64 finalizer; mixes seeds into independent stream keys.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One weekday of speed: a free-flow level with a morning and an evening
/// rush-hour dip.
fn random_profile(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let level = rng.random_range(60.0..70.0);
    // centers span 06:00-09:30 and 15:00-19:00, in 5-minute steps
    let shapes: Vec<(f64, f64, f64)> = [(72.0, 114.0), (180.0, 228.0)]
        .iter()
        .map(|&(lo, hi)| {
            let center = rng.random_range(lo..hi);
            let width = rng.random_range(20.0..45.0);
            let depth = rng.random_range(0.3..0.6);
            (center, width, depth)
        })
        .collect();
    (0..POINTS_PER_DAY)
        .map(|t| {
            let t = t as f64;
            let drop: f64 = shapes
                .iter()
                .map(|&(c, w, d)| d * (-0.5 * ((t - c) / w).powi(2)).exp())
                .sum();
            level * (1.0 - drop.min(0.6))
        })
        .collect()
}

fn profile_gap(a: &[f64], b: &[f64]) -> f64 {
    let ab = metrics::aard(a, b).expect("equal lengths");
    let ba = metrics::aard(b, a).expect("equal lengths");
    ab.min(ba)
}

/// Deterministic library of `num_patterns` daily profiles whose pairwise
/// zero-noise AARD is at least `min_pattern_gap` in both directions.
pub fn pattern_library(spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(spec.seed ^ 0x5041_5454_4552_4e53));
    let mut library: Vec<Vec<f64>> = Vec::with_capacity(spec.num_patterns);
    let mut attempts = 0;
    while library.len() < spec.num_patterns {
        attempts += 1;
        if attempts > 200_000 {
            return Err(Error::config(format!(
                "could not place {} patterns at gap {}",
                spec.num_patterns, spec.min_pattern_gap
            )));
        }
        let candidate = random_profile(&mut rng);
        if library
            .iter()
            .all(|p| profile_gap(p, &candidate) >= spec.min_pattern_gap)
        {
            library.push(candidate);
        }
    }
    Ok(library)
}

/// Synthetic series: each detector repeats its base profile every day and
/// adds uniform noise in ±`noise_amplitude`, clamped at zero.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SpeedSeries>> {
    let library = pattern_library(spec)?;
    let start = Utc
        .with_ymd_and_hms(2020, 1, 6, 0, 0, 0)
        .single()
        .expect("valid date");
    let noise = (spec.noise_amplitude > 0.0)
        .then(|| Uniform::new_inclusive(-spec.noise_amplitude, spec.noise_amplitude).expect("finite"));
    Ok((0..spec.num_detectors)
        .map(|i| {
            let base = &library[spec.pattern_of(i)];
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(spec.seed.wrapping_add(mix64(i as u64))));
            let values = (0..spec.days * POINTS_PER_DAY)
                .map(|t| {
                    let v = base[t % POINTS_PER_DAY];
                    match &noise {
                        Some(n) => (v + n.sample(&mut rng)).max(0.0),
                        None => v,
                    }
                })
                .collect();
            SpeedSeries {
                detector_id: SyntheticSpec::detector_id(i),
                start_time: start,
                interval_secs: INTERVAL_SECS,
                values,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffendingPair {
    pub first: String,
    pub second: String,
    pub same_cluster: bool,
    pub aard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub passed: bool,
    /// Largest AARD between two detectors of the same cluster.
    pub max_within: f64,
    /// Smallest AARD between detectors of different clusters.
    pub min_across: f64,
    pub offending_pairs: Vec<OffendingPair>,
}

/// Check every ordered pair: same-cluster AARD must be below `thd_aard`,
/// cross-cluster AARD above it.
pub fn verify_separation(
    series: &[SpeedSeries],
    clusters: &[usize],
    f: f64,
    thd_aard: f64,
) -> Result<SeparationReport> {
    if series.len() != clusters.len() {
        return Err(Error::data("one cluster label per series required"));
    }
    if let Some(first) = series.first() {
        if let Some(bad) = series.iter().find(|s| s.len() != first.len()) {
            return Err(Error::data(format!(
                "detector {} has {} points, expected {}",
                bad.detector_id,
                bad.len(),
                first.len()
            )));
        }
    }
    let normalized: Vec<NormalizedSeries> = series.iter().map(|s| normalize(s, f)).collect::<Result<_>>()?;
    let mut report = SeparationReport {
        passed: true,
        max_within: 0.0,
        min_across: f64::INFINITY,
        offending_pairs: Vec::new(),
    };
    for i in 0..normalized.len() {
        for j in 0..normalized.len() {
            if i == j {
                continue;
            }
            let d = metrics::aard(&normalized[i].values, &normalized[j].values)?;
            let same = clusters[i] == clusters[j];
            let ok = if same {
                report.max_within = report.max_within.max(d);
                d < thd_aard
            } else {
                report.min_across = report.min_across.min(d);
                d > thd_aard
            };
            if !ok {
                report.passed = false;
                report.offending_pairs.push(OffendingPair {
                    first: normalized[i].detector_id.clone(),
                    second: normalized[j].detector_id.clone(),
                    same_cluster: same,
                    aard: d,
                });
            }
        }
    }
    Ok(report)
}
