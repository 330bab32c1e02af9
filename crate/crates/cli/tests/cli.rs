use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output};
use std::thread;
use std::time::Duration;

use speedshare::coordinator::{
    evaluate_registry, registry_load, registry_save, ModelAssignment, Registry, RunConfig,
};
use speedshare::data::{load_csv, POINTS_PER_DAY};
use speedshare::lstm::{HyperparameterSetting, LstmModel};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_speedshare"))
}

fn speedshare(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = speedshare(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Four detectors over two patterns.
fn small_data(dir: &Path) -> PathBuf {
    let path = dir.join("small.csv");
    ok(&[
        "synth",
        "--detectors",
        "4",
        "--patterns",
        "2",
        "--seed",
        "5",
        "--noise",
        "1.0",
        "--out",
        p(&path),
    ]);
    path
}

fn run_args<'a>(data: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "run",
        "--data",
        data,
        "--grid-profile",
        "test",
        "--seed",
        "3",
        "--out",
        out,
    ]
}

fn summary_line<'a>(stdout: &'a str, prefix: &str) -> &'a str {
    stdout
        .lines()
        .find(|l| l.starts_with(prefix))
        .unwrap_or_else(|| panic!("no {prefix:?} line in\n{stdout}"))
}

#[test]
fn synth_default_shape() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let stdout = ok(&["synth", "--out", p(&path)]);
    assert!(stdout.contains("separated"));
    let series = load_csv(&path).unwrap();
    assert_eq!(series.len(), 110);
    assert!(series.iter().all(|s| s.len() == 6 * POINTS_PER_DAY));
}

#[test]
fn synth_single_noiseless_pattern_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    ok(&[
        "synth",
        "--detectors",
        "5",
        "--patterns",
        "1",
        "--noise",
        "0",
        "--out",
        p(&path),
    ]);
    let series = load_csv(&path).unwrap();
    assert!(series.iter().all(|s| s.values == series[0].values));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = speedshare(&[
        "synth",
        "--detectors",
        "3",
        "--patterns",
        "5",
        "--out",
        p(&dir.path().join("x.csv")),
    ]);
    assert_eq!(bad.status.code(), Some(2));

    let missing = speedshare(&["ingest", "--data", p(&dir.path().join("nope.csv"))]);
    assert_eq!(missing.status.code(), Some(3));

    let garbage = dir.path().join("garbage.csv");
    std::fs::write(&garbage, "detector_id,timestamp,speed_mph\nd,yesterday,50\n").unwrap();
    assert_eq!(
        speedshare(&["ingest", "--data", p(&garbage)]).status.code(),
        Some(3)
    );

    let data = small_data(dir.path());
    let no_registry = speedshare(&[
        "predict",
        "--registry",
        p(dir.path()),
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("f.csv")),
    ]);
    assert_eq!(no_registry.status.code(), Some(5));
    assert_eq!(
        speedshare(&["report", "--run", p(dir.path())]).status.code(),
        Some(5)
    );

    let config = speedshare(&[
        "run",
        "--data",
        p(&data),
        "--workers",
        "0",
        "--out",
        p(&dir.path().join("r")),
    ]);
    assert_eq!(config.status.code(), Some(2));

    let port = free_port();
    let listen = format!("127.0.0.1:{port}");
    let lonely = speedshare(&[
        "run",
        "--data",
        p(&data),
        "--mode",
        "distributed",
        "--listen",
        &listen,
        "--accept-timeout",
        "1",
        "--grid-profile",
        "test",
        "--out",
        p(&dir.path().join("r")),
    ]);
    assert_eq!(lonely.status.code(), Some(4));

    assert!(!speedshare(&["run", "--bogus-flag"]).status.success());
}

#[test]
fn ingest_rewrites_canonically() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let copy = dir.path().join("copy.csv");
    let stdout = ok(&["ingest", "--data", p(&data), "--out", p(&copy)]);
    assert!(stdout.contains("4 detectors x 1728 readings"));
    assert_eq!(load_csv(&copy).unwrap(), load_csv(&data).unwrap());
}

#[test]
fn run_with_and_without_sharing() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let data = p(&data);

    let on = dir.path().join("on");
    let stdout = ok(&run_args(data, p(&on)));
    assert_eq!(
        summary_line(&stdout, "models customized"),
        "models customized: 2/4"
    );
    assert!(summary_line(&stdout, "makespan").ends_with(" s"));
    summary_line(&stdout, "average AARE");
    summary_line(&stdout, "average AAE");
    summary_line(&stdout, "average RMSE");
    for f in ["config.json", "report.json", "registry/manifest.json"] {
        assert!(on.join(f).is_file(), "{f} missing");
    }

    let off = dir.path().join("off");
    let mut args = run_args(data, p(&off));
    args.extend(["--sharing", "off"]);
    assert_eq!(
        summary_line(&ok(&args), "models customized"),
        "models customized: 4/4"
    );

    let zero = dir.path().join("zero");
    let mut args = run_args(data, p(&zero));
    args.extend(["--thd-aard", "0"]);
    assert_eq!(
        summary_line(&ok(&args), "models customized"),
        "models customized: 4/4"
    );
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("run");
    ok(&run_args(p(&data), p(&out)));

    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    let config: RunConfig = serde_json::from_value(echo["config"].clone()).unwrap();
    let echoed_data = PathBuf::from(echo["data"].as_str().unwrap());
    let again = speedshare::coordinator::run(&load_csv(echoed_data).unwrap(), &config).unwrap();
    let stored = registry_load(out.join("registry")).unwrap();
    assert_eq!(again.registry, stored);
}

#[test]
fn report_csv_matches_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run_dir = dir.path().join("run");
    ok(&run_args(p(&data), p(&run_dir)));

    let csv = ok(&["report", "--run", p(&run_dir), "--format", "csv"]);
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(
        rows[0],
        [
            "scope",
            "detector_id",
            "model_owner",
            "aare",
            "aae",
            "rmse",
            "converged"
        ]
    );
    assert_eq!(rows.len(), 1 + 1 + 4);
    assert_eq!(rows[1][0], "aggregate");
    assert!(rows[2..].iter().all(|r| r[0] == "detector"));

    let registry = registry_load(run_dir.join("registry")).unwrap();
    let fresh = evaluate_registry(&registry, &load_csv(&data).unwrap()).unwrap();
    let num = |s: &str| s.parse::<f64>().unwrap();
    let close = |a: f64, b: f64| assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    close(num(rows[1][3]), fresh.average_aare);
    close(num(rows[1][4]), fresh.average_aae);
    close(num(rows[1][5]), fresh.average_rmse);
    for (row, d) in rows[2..].iter().zip(&fresh.per_detector) {
        assert_eq!(row[1], d.detector_id);
        close(num(row[3]), d.report.aare);
        close(num(row[4]), d.report.aae);
        close(num(row[5]), d.report.rmse);
    }

    let json: serde_json::Value = serde_json::from_str(&ok(&["report", "--run", p(&run_dir)])).unwrap();
    close(json["average_aare"].as_f64().unwrap(), fresh.average_aare);
    assert_eq!(json["model_count_curve"].as_array().unwrap().len(), 4);
    let searches = json["searches"].as_array().unwrap();
    assert_eq!(searches.len(), 2);
    assert!(searches[0]["termination"].is_string());
}

#[test]
fn predict_with_zero_weight_registry_is_constant() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let config = RunConfig::test_profile();
    let mut registry = Registry {
        config: config.clone(),
        assignments: vec![
            ModelAssignment::owned("det-000"),
            ModelAssignment::owned("det-001"),
            ModelAssignment::shared("det-002", "det-000", 0.01),
            ModelAssignment::shared("det-003", "det-001", 0.01),
        ],
        models: Default::default(),
    };
    for id in ["det-000", "det-001"] {
        let setting = HyperparameterSetting {
            learning_rate: 0.01,
            layers: 2,
            units: 3,
            epochs: 5,
        };
        registry.models.insert(
            id.into(),
            LstmModel::zeroed(setting, config.window_length, config.f),
        );
    }
    let reg_dir = dir.path().join("reg");
    registry_save(&registry, &reg_dir).unwrap();

    let out = dir.path().join("forecast.csv");
    ok(&[
        "predict",
        "--registry",
        p(&reg_dir),
        "--data",
        p(&data),
        "--out",
        p(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("detector_id,timestamp,actual_mph,forecast_mph")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4 * (POINTS_PER_DAY - config.window_length));
    let forecasts: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(forecasts.iter().all(|&v| v == forecasts[0]));
    // all-zero weights give a zero output
    assert_eq!(forecasts[0], 0.0);
    assert_eq!(rows[0][1], "2020-01-11T01:00:00Z");
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

fn spawn_worker(addr: &str, id: &str) -> Child {
    bin()
        .args(["worker", "--connect", addr, "--id", id, "--patience", "20"])
        .spawn()
        .unwrap()
}

#[test]
fn distributed_run_survives_a_killed_worker() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let local = dir.path().join("local");
    let mut args = run_args(p(&data), p(&local));
    args.extend(["--sharing", "off"]);
    ok(&args);

    let addr = format!("127.0.0.1:{}", free_port());
    let remote = dir.path().join("remote");
    let mut args = run_args(p(&data), p(&remote));
    args.extend([
        "--sharing",
        "off",
        "--mode",
        "distributed",
        "--workers",
        "2",
        "--listen",
        &addr,
        "--accept-timeout",
        "30",
    ]);
    let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    let master = thread::spawn(move || bin().args(&args).output());
    // the master binds before workers dial; workers retry within their patience
    let mut doomed = spawn_worker(&addr, "doomed");
    let mut steady = spawn_worker(&addr, "steady");
    thread::sleep(Duration::from_millis(1500));
    doomed.kill().unwrap();
    doomed.wait().unwrap();

    let out = master.join().unwrap().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(steady.wait().unwrap().success());

    let a = registry_load(local.join("registry")).unwrap();
    let b = registry_load(remote.join("registry")).unwrap();
    assert_eq!(a.assignments, b.assignments);
    assert_eq!(a.models, b.models);
}
