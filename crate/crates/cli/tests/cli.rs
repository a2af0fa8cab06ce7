use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use shapespline::dynamics::{integrate_geodesic, PhaseState, TimeGrid};
use shapespline::io::{rows, DatasetFile, ExperimentConfig, Snapshot};
use shapespline::kernels::GaussianKernel;

fn shapespline(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapespline"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

/// Three landmarks following a geodesic, observed at 0.5 and 1.
fn geodesic_dataset(path: &Path) {
    let k = GaussianKernel::new(1.0).unwrap();
    let x0 = vec![1.0, 0.0, -0.5, 0.8, -0.5, -0.8];
    let p0 = vec![0.2, 0.1, -0.1, 0.3, 0.0, -0.2];
    let q0 = PhaseState::new(2, x0.clone(), p0).unwrap();
    let grid = TimeGrid::new(1.0, 40).unwrap();
    let traj = integrate_geodesic(&q0, grid, &k).unwrap();
    let ds = DatasetFile {
        dimension: 2,
        landmarks: 3,
        initial: Some(rows(&x0, 2)),
        observations: [20, 40]
            .iter()
            .map(|j| Snapshot {
                time: grid.node(*j),
                points: rows(&traj.states[*j].x, 2),
            })
            .collect(),
        truth: None,
    };
    ds.write(path).unwrap();
}

#[test]
fn fit_recovers_a_geodesic() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("geo.json");
    geodesic_dataset(&ds);
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"optimizer_settings": {"tolerance": 1e-8, "relative_tolerance": false}}"#,
    )
    .unwrap();
    let out = dir.path().join("fit");
    let o = shapespline(
        &[
            "fit",
            "--dataset",
            ds.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--gamma",
            "1e4",
            "--svg",
        ],
        &out,
    );
    ok(&o);
    let s = summary(&out);
    assert_eq!(s["command"], "fit");
    assert!(s["converged"].as_bool().unwrap());
    assert!(s["control_energy"].as_f64().unwrap() < 1e-6, "{s}");
    assert!(s["euler_lagrange_residual"].as_f64().unwrap() < 1e-6, "{s}");
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("t,x_1_1,x_1_2,x_2_1"));
    assert!(header.ends_with("u_3_1,u_3_2"));
    assert_eq!(csv.lines().count(), 1 + 41);
    let svg = fs::read_to_string(out.join("trajectory.svg")).unwrap();
    roxmltree::Document::parse(&svg).unwrap();
}

#[test]
fn synth_is_deterministic_and_feeds_fit() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = [
        "synth",
        "--kind",
        "pinched-ellipse",
        "--landmarks",
        "8",
        "--noise",
        "0.1",
        "--seed",
        "4",
    ];
    ok(&shapespline(&args, &a));
    ok(&shapespline(&args, &b));
    let bytes = fs::read(a.join("dataset.json")).unwrap();
    assert_eq!(bytes, fs::read(b.join("dataset.json")).unwrap());
    let ds = DatasetFile::read(&a.join("dataset.json")).unwrap();
    assert_eq!(ds.observations.len(), 5);
    assert!((ds.observations[4].time - 3.8).abs() < 1e-12);

    let out = dir.path().join("base");
    let path = a.join("dataset.json");
    ok(&shapespline(
        &[
            "baseline",
            "--dataset",
            path.to_str().unwrap(),
            "--gamma",
            "10",
            "--lambda",
            "0.6",
        ],
        &out,
    ));
    let s = summary(&out);
    assert_eq!(s["command"], "baseline");
    assert!(s["truth_l2_error"].as_f64().unwrap() > 0.0);

    let out = dir.path().join("rot");
    ok(&shapespline(
        &[
            "synth",
            "--kind",
            "rotating-ellipse",
            "--landmarks",
            "6",
            "--times",
            "4",
            "--dense-steps",
            "40",
        ],
        &out,
    ));
    let ds = DatasetFile::read(&out.join("dataset.json")).unwrap();
    assert_eq!(ds.truth.unwrap().len(), 41);
}

#[test]
fn schema_violations_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("bad.json");
    fs::write(
        &ds,
        r#"{"dimension": 2, "landmarks": 2, "initial": [[0, 0], [1, 0]],
            "observations": [{"time": 1.0, "points": [[0, 0], [1]]}]}"#,
    )
    .unwrap();
    let o = shapespline(
        &["fit", "--dataset", ds.to_str().unwrap(), "--error-json"],
        &dir.path().join("o"),
    );
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).unwrap();
    assert_eq!(err["error"], "validation");
    assert!(err["message"].as_str().unwrap().contains("observations[0].points[1]"));

    fs::write(&ds, "{\n  \"dimension\": 2,\n  oops\n}").unwrap();
    let o = shapespline(&["fit", "--dataset", ds.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"kernel_widht": 1.0}"#).unwrap();
    let o = shapespline(&["simulate", "--config", cfg.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(2));

    let o = shapespline(&["fit"], &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = shapespline(
        &["simulate", "--eps-scaled", "1e300", "--error-json"],
        &dir.path().join("o"),
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).unwrap();
    assert_eq!(err["error"], "diverged");
}

#[test]
fn montecarlo_matches_the_drift_law() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mc");
    ok(&shapespline(
        &["montecarlo", "--runs", "200", "--eps-scaled", "1.0"],
        &out,
    ));
    let s = summary(&out);
    assert_eq!(s["divergences"], 0);
    assert!(s["relative_deviation"].as_f64().unwrap() < 0.15, "{s}");
    let csv = fs::read_to_string(out.join("montecarlo.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 1001);
}

#[test]
fn convergence_reports_two_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"gamma": 1e7, "optimizer_settings": {"tolerance": 1e-8, "relative_tolerance": false, "max_iterations": 20000},
            "convergence": {"steps_per_gap": 10}}"#,
    )
    .unwrap();
    let out = dir.path().join("conv");
    let o = shapespline(
        &[
            "convergence",
            "--config",
            cfg.to_str().unwrap(),
            "--truth",
            "quartic",
            "--methods",
            "spline,piecewise",
            "--M",
            "3,5,7",
        ],
        &out,
    );
    ok(&o);
    let s = summary(&out);
    let spline = s["slopes"]["spline"].as_f64().unwrap();
    let piecewise = s["slopes"]["piecewise"].as_f64().unwrap();
    assert!(spline > piecewise + 1.0, "{s}");
    let rows = s["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    for r in rows {
        assert_eq!(r["converged"], true, "{r}");
        if r["method"] == "spline" {
            assert!(r["stationarity"].as_f64().unwrap() < 1e-6, "{r}");
        } else {
            assert!(r["stationarity"].is_null());
        }
    }
    let csv = fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "method,M,E,runtime_seconds");
    assert_eq!(csv.lines().count(), 1 + 6);

    let o = shapespline(&["convergence", "--methods", "spline,bogus", "--M", "3"], &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn extrapolation_and_kunita_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("geo.json");
    geodesic_dataset(&ds);
    let out = dir.path().join("ext");
    ok(&shapespline(
        &["extrapolate", "--dataset", ds.to_str().unwrap(), "--t-end", "1.5"],
        &out,
    ));
    let csv = fs::read_to_string(out.join("extrapolation.csv")).unwrap();
    let first: f64 = csv.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    let last: f64 = csv.lines().last().unwrap().split(',').next().unwrap().parse().unwrap();
    assert!((first - 1.0).abs() < 1e-12 && (last - 1.5).abs() < 1e-9);

    let o = shapespline(
        &["extrapolate", "--dataset", ds.to_str().unwrap(), "--t-end", "0.5"],
        &out,
    );
    assert_eq!(o.status.code(), Some(2));

    let out = dir.path().join("kun");
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"simulation": {"landmarks": 6, "steps": 50}}"#).unwrap();
    ok(&shapespline(
        &["kunita", "--config", cfg.to_str().unwrap(), "--seed", "3", "--svg"],
        &out,
    ));
    let csv = fs::read_to_string(out.join("positions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 51);
    roxmltree::Document::parse(&fs::read_to_string(out.join("positions.svg")).unwrap()).unwrap();
    let again = dir.path().join("kun2");
    ok(&shapespline(
        &["kunita", "--config", cfg.to_str().unwrap(), "--seed", "3"],
        &again,
    ));
    assert_eq!(csv, fs::read_to_string(again.join("positions.csv")).unwrap());
}

#[test]
fn shipped_presets_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        ExperimentConfig::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        count += 1;
    }
    assert!(count >= 5);
}
