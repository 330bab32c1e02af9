use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use speedshare::coordinator::{self, Mode, RunConfig, RunReport};
use speedshare::data::{self, SyntheticSpec, INTERVAL_SECS};
use speedshare::lstm;
use speedshare::netproto;
use speedshare::nmm::{GridSpec, NmmConfig};
use speedshare::Error;

const CONFIG_FILE: &str = "config.json";
const REPORT_FILE: &str = "report.json";
const REGISTRY_DIR: &str = "registry";

/// Halvings of the noise amplitude tried when a synthetic set fails the
/// separation check.
const CALIBRATION_RETRIES: usize = 6;

#[derive(Parser)]
#[command(
    name = "speedshare",
    version,
    about = "Per-detector traffic-speed forecasting with model sharing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Local,
    Distributed,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GridProfile {
    /// Epochs 5..50 and at most 10 evaluations per search.
    Test,
    /// The full hyperparameter domains and 50 evaluations.
    Production,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic detector population as CSV.
    Synth {
        #[arg(long, default_value_t = 110)]
        detectors: usize,
        #[arg(long, default_value_t = 31)]
        patterns: usize,
        #[arg(long, default_value_t = 6)]
        days: usize,
        /// Half-width of the uniform noise, in mph.
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        thd_aard: f64,
        #[arg(long, default_value_t = 70.0)]
        f: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a detector CSV and optionally rewrite it in canonical order.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assign a model to every detector and evaluate on the test day.
    Run {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        sharing: Switch,
        #[arg(long, default_value_t = 0.1)]
        thd_aard: f64,
        #[arg(long, default_value_t = 0.05)]
        thd_aare: f64,
        #[arg(long, default_value_t = 70.0)]
        f: f64,
        #[arg(long, default_value_t = 12)]
        window: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ModeArg::Local)]
        mode: ModeArg,
        /// Address remote workers connect to in distributed mode.
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Seconds to wait for all remote workers to connect.
        #[arg(long, default_value_t = 60)]
        accept_timeout: u64,
        #[arg(long, value_enum, default_value_t = GridProfile::Production)]
        grid_profile: GridProfile,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve customization jobs for a master.
    Worker {
        #[arg(long)]
        connect: String,
        #[arg(long, default_value = "worker")]
        id: String,
        /// Seconds to keep retrying the initial connection.
        #[arg(long, default_value_t = 30)]
        patience: u64,
    },
    /// Write test-day forecasts for every detector of a registry.
    Predict {
        /// A registry directory, or a run directory containing one.
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the results of a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) => 2,
        Error::Data(_)
        | Error::Parse { .. }
        | Error::Cadence { .. }
        | Error::Numerical { .. }
        | Error::Training { .. }
        | Error::Io(_) => 3,
        Error::Connectivity(_) | Error::Handshake(_) | Error::Framing(_) | Error::Protocol(_) => 4,
        Error::Integrity(_) | Error::Format(_) => 5,
        Error::Detector { .. } => unreachable!("root skips detector context"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn execute(command: Command) -> speedshare::Result<()> {
    match command {
        Command::Synth {
            detectors,
            patterns,
            days,
            noise,
            seed,
            thd_aard,
            f,
            out,
        } => synth(
            SyntheticSpec::new(detectors, patterns, days, noise, seed),
            thd_aard,
            f,
            &out,
        ),
        Command::Ingest { data, out } => ingest(&data, out.as_deref()),
        Command::Run {
            data,
            workers,
            sharing,
            thd_aard,
            thd_aare,
            f,
            window,
            seed,
            mode,
            listen,
            accept_timeout,
            grid_profile,
            out,
        } => {
            let (grid, nmm) = match grid_profile {
                GridProfile::Test => (GridSpec::test_profile(), NmmConfig::test_profile()),
                GridProfile::Production => (GridSpec::production(), NmmConfig::default()),
            };
            let config = RunConfig {
                sharing_enabled: sharing == Switch::On,
                workers,
                thd_aard,
                thd_aare,
                f,
                window_length: window,
                grid,
                nmm,
                run_seed: seed,
                mode: match mode {
                    ModeArg::Local => Mode::Local,
                    ModeArg::Distributed => Mode::Distributed {
                        listen,
                        accept_timeout_secs: accept_timeout,
                    },
                },
                ..RunConfig::default()
            };
            run(&data, config, &out)
        }
        Command::Worker {
            connect,
            id,
            patience,
        } => netproto::serve_worker(&connect, &id, Duration::from_secs(patience)),
        Command::Predict { registry, data, out } => predict(&registry, &data, &out),
        Command::Report { run, format } => report(&run, format),
    }
}

fn synth(mut spec: SyntheticSpec, thd_aard: f64, f: f64, out: &Path) -> speedshare::Result<()> {
    for attempt in 0..=CALIBRATION_RETRIES {
        let series = data::generate_synthetic(&spec)?;
        let clusters: Vec<usize> = (0..series.len()).map(|i| spec.pattern_of(i)).collect();
        let check = data::verify_separation(&series, &clusters, f, thd_aard)?;
        println!(
            "noise {} mph: max within-pattern AARD {:.4}, min across-pattern AARD {:.4}, {}",
            spec.noise_amplitude,
            check.max_within,
            check.min_across,
            if check.passed {
                "separated"
            } else {
                "NOT separated"
            }
        );
        if check.passed {
            data::save_csv(&series, out)?;
            println!(
                "wrote {} detectors x {} readings from {} patterns to {}",
                series.len(),
                series.first().map_or(0, |s| s.len()),
                spec.num_patterns,
                out.display()
            );
            return Ok(());
        }
        if attempt < CALIBRATION_RETRIES {
            spec.noise_amplitude /= 2.0;
        }
    }
    Err(Error::Data(format!(
        "patterns are not separated at AARD {thd_aard} even with noise {} mph",
        spec.noise_amplitude
    )))
}

fn ingest(path: &Path, out: Option<&Path>) -> speedshare::Result<()> {
    let series = data::load_csv(path)?;
    let Some(first) = series.first() else {
        return Err(Error::Data(format!("{} holds no readings", path.display())));
    };
    if let Some(bad) = series.iter().find(|s| s.len() != first.len()) {
        return Err(
            Error::Data(format!("{} readings, {} expected", bad.len(), first.len()))
                .for_detector(&bad.detector_id),
        );
    }
    println!(
        "{} detectors x {} readings every {} s from {}",
        series.len(),
        first.len(),
        INTERVAL_SECS,
        first.start_time.to_rfc3339()
    );
    if let Some(out) = out {
        data::save_csv(&series, out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> speedshare::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn run(data_path: &Path, config: RunConfig, out: &Path) -> speedshare::Result<()> {
    config.validate()?;
    let detectors = data::load_csv(data_path)?;
    fs::create_dir_all(out)?;
    let data_abs = fs::canonicalize(data_path)?;
    write_json(
        &out.join(CONFIG_FILE),
        &json!({ "data": data_abs, "config": config }),
    )?;

    let output = coordinator::run(&detectors, &config)?;
    coordinator::registry_save(&output.registry, out.join(REGISTRY_DIR))?;
    write_json(&out.join(REPORT_FILE), &output.report)?;

    let r = &output.report;
    println!("makespan: {:.3} s", r.makespan_seconds);
    println!("models customized: {}/{}", r.models_customized, r.detectors);
    println!("average AARE: {:.6}", r.aggregate.average_aare);
    println!("average AAE: {:.6} mph", r.aggregate.average_aae);
    println!("average RMSE: {:.6} mph", r.aggregate.average_rmse);
    let flagged: Vec<&str> = r.non_converged().map(|c| c.detector_id.as_str()).collect();
    if flagged.is_empty() {
        println!("all customized models reached AARE <= {}", config.thd_aare);
    } else {
        println!(
            "not converged ({}/{}): {}",
            flagged.len(),
            r.customizations.len(),
            flagged.join(" ")
        );
    }
    Ok(())
}

fn open_registry(path: &Path) -> speedshare::Result<coordinator::Registry> {
    let nested = path.join(REGISTRY_DIR);
    if nested.join("manifest.json").is_file() {
        coordinator::registry_load(nested)
    } else {
        coordinator::registry_load(path)
    }
}

fn predict(registry_path: &Path, data_path: &Path, out: &Path) -> speedshare::Result<()> {
    let registry = open_registry(registry_path)?;
    let detectors = data::load_csv(data_path)?;
    let splits = coordinator::prepare(&detectors, &registry.config)?;
    let config = &registry.config;
    let offset = config.train_days * data::POINTS_PER_DAY + config.window_length;

    let mut w = csv_writer(out)?;
    write_row(
        &mut w,
        &["detector_id", "timestamp", "actual_mph", "forecast_mph"],
    )?;
    for (series, split) in detectors.iter().zip(&splits) {
        let id = &series.detector_id;
        let model = registry
            .model_for(id)
            .ok_or_else(|| Error::Integrity(format!("registry has no model for detector {id}")))?;
        let forecast = lstm::predict_series(model, &split.test.values).map_err(|e| e.for_detector(id))?;
        for (k, value) in forecast.iter().enumerate() {
            let actual = split.test.values[config.window_length + k] * model.f;
            let ts = series
                .timestamp(offset + k)
                .format("%Y-%m-%dT%H:%M:%SZ")
                .to_string();
            write_row(&mut w, &[id, &ts, &actual.to_string(), &value.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_writer(path: &Path) -> speedshare::Result<io::BufWriter<fs::File>> {
    Ok(io::BufWriter::new(fs::File::create(path)?))
}

fn write_row(w: &mut impl Write, fields: &[&str]) -> speedshare::Result<()> {
    writeln!(w, "{}", fields.join(","))?;
    Ok(())
}

fn load_report(run_dir: &Path) -> speedshare::Result<RunReport> {
    let path = run_dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Integrity(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn report(run_dir: &Path, format: Format) -> speedshare::Result<()> {
    let r = load_report(run_dir)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match format {
        Format::Json => {
            let searches: Vec<_> = r
                .customizations
                .iter()
                .map(|c| {
                    json!({
                        "detector_id": c.detector_id,
                        "best_setting": c.best_setting,
                        "validation_aare": c.validation_aare,
                        "converged": c.converged,
                        "evaluations": c.evaluations,
                        "termination": c.termination,
                    })
                })
                .collect();
            let doc = json!({
                "makespan_seconds": r.makespan_seconds,
                "models_customized": r.models_customized,
                "detectors": r.detectors,
                "average_aare": r.aggregate.average_aare,
                "average_aae": r.aggregate.average_aae,
                "average_rmse": r.aggregate.average_rmse,
                "model_count_curve": r.model_count_curve,
                "per_detector": r.aggregate.per_detector,
                "searches": searches,
            });
            let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(out, "{text}")?;
        }
        Format::Csv => {
            write_row(
                &mut out,
                &[
                    "scope",
                    "detector_id",
                    "model_owner",
                    "aare",
                    "aae",
                    "rmse",
                    "converged",
                ],
            )?;
            let a = &r.aggregate;
            write_row(
                &mut out,
                &[
                    "aggregate",
                    "",
                    "",
                    &a.average_aare.to_string(),
                    &a.average_aae.to_string(),
                    &a.average_rmse.to_string(),
                    "",
                ],
            )?;
            for (d, status) in a.per_detector.iter().zip(&r.detector_status) {
                write_row(
                    &mut out,
                    &[
                        "detector",
                        &d.detector_id,
                        &status.model_owner,
                        &d.report.aare.to_string(),
                        &d.report.aae.to_string(),
                        &d.report.rmse.to_string(),
                        &status.converged.to_string(),
                    ],
                )?;
            }
        }
    }
    Ok(())
}
