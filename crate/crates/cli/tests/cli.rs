use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tpa_cli::config::ExperimentConfig;
use tpa_cli::error::exit;
use tpa_transport::fields::ScalarField;
use tpa_transport::geometry::{AngularGrid, SpatialGrid};
use tpa_transport::phantom::Phantom;
use tpa_transport::synthesis::{InternalDatum, Provenance};
use tpa_transport::transport::{GeneralSource, LinearSolveConfig, TransportSolver};

fn tpa(cmd: &str, config: &Path, output: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpa"))
        .args([cmd, "--config"])
        .arg(config)
        .arg("--output")
        .arg(output)
        .env("TPA_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn stdout_report(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("report on stdout")
}

fn constant_config(n: usize, sigma_b: f64, sigma_s: f64) -> Value {
    json!({
        "grid": {"lx": 1.0, "ly": 1.0, "nx": n, "ny": n, "n_v": 8},
        "coefficients": {"phantom": {"spec": {"name": "constant", "sigma_a": 1.0, "sigma_b": sigma_b, "sigma_s": sigma_s}}},
        "sources": [{"type": "general", "value": 0.5}],
        "solver": {"tol_fixed_point": 1e-10},
        "seed": 5
    })
}

#[test]
fn forward_without_two_photon_matches_linear_solve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &constant_config(12, 0.0, 0.5));
    let out = dir.path().join("out");
    let o = tpa("forward", &cfg, &out);
    assert_eq!(
        o.status.code(),
        Some(exit::OK),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    let grid = SpatialGrid::unit_square(12).unwrap();
    let angles = AngularGrid::new(8).unwrap();
    let c = Phantom::constant(1.0, 0.0, 0.5)
        .coefficients(grid, &angles)
        .unwrap();
    let lin = LinearSolveConfig {
        ray_step: 1.0 / 12.0,
        ..Default::default()
    };
    let solver = TransportSolver::new(grid, angles, lin).unwrap();
    let direct = solver
        .solve_linear(&c.sigma_a, &c, &GeneralSource::Constant(0.5))
        .unwrap()
        .average();
    let got = ScalarField::load_csv(&out.join("u_avg_s1.csv"), grid).unwrap();
    assert!(
        got.sup_distance(&direct) <= 1e-10,
        "{}",
        got.sup_distance(&direct)
    );

    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["success"], true);
    assert_eq!(report, stdout_report(&o));
    assert!(!out.join(".tpa.lock").exists());
}

#[test]
fn malformed_config_exits_2_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = constant_config(8, 0.5, 0.0);
    v["grid"]["nx"] = json!(-8);
    let cfg = write_config(dir.path(), &v);
    let out = dir.path().join("out");
    let o = tpa("forward", &cfg, &out);
    assert_eq!(o.status.code(), Some(exit::CONFIG));
    assert!(!out.exists());
    let r = stdout_report(&o);
    assert_eq!(r["success"], false);
    assert_eq!(r["exit_code"], exit::CONFIG);
}

#[test]
fn missing_reference_and_missing_block_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = constant_config(8, 0.5, 0.0);
    v["task"] = json!({"data": ["nowhere.csv", "nowhere2.csv"]});
    let out = dir.path().join("out");
    let o = tpa("recon-free", &write_config(dir.path(), &v), &out);
    assert_eq!(o.status.code(), Some(exit::CONFIG));
    assert!(!out.exists());

    let v = json!({"grid": {"lx": 1.0, "ly": 1.0, "nx": 8, "ny": 8, "n_v": 8}, "seed": 1});
    let o = tpa("forward", &write_config(dir.path(), &v), &out);
    assert_eq!(o.status.code(), Some(exit::CONFIG));
}

#[test]
fn convergence_failure_exits_3_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = constant_config(8, 0.5, 1.0);
    v["solver"]["max_outer_iters"] = json!(1);
    let out = dir.path().join("out");
    let o = tpa("forward", &write_config(dir.path(), &v), &out);
    assert_eq!(o.status.code(), Some(exit::CONVERGENCE));
    let r: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["success"], false);
    assert!(r["error"].as_str().unwrap().contains("did not converge"));
}

#[test]
fn negative_datum_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let grid = SpatialGrid::unit_square(8).unwrap();
    let mut paths = Vec::new();
    for (k, sign) in [(1, 1.0), (2, -1.0)] {
        let d = InternalDatum {
            h: ScalarField::constant(grid, 0.2 * sign),
            provenance: Provenance {
                source_id: format!("s{k}"),
                grid,
                noise_level: 0.0,
                seed: None,
                refinement: 1,
            },
        };
        let p = dir.path().join(format!("h{k}.csv"));
        d.save(&p).unwrap();
        paths.push(p);
    }
    let mut v = constant_config(8, 0.5, 1.0);
    v["sources"] = json!([{"type": "general", "value": 1.0}, {"type": "general", "value": 0.4}]);
    v["task"] = json!({"data": paths, "starts": "upper"});
    let o = tpa(
        "recon-scatter",
        &write_config(dir.path(), &v),
        &dir.path().join("out"),
    );
    assert_eq!(
        o.status.code(),
        Some(exit::DATA),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn busy_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".tpa.lock"), "1").unwrap();
    let o = tpa(
        "forward",
        &write_config(dir.path(), &constant_config(8, 0.5, 0.0)),
        &out,
    );
    assert_eq!(o.status.code(), Some(exit::FAILURE));
    assert!(!out.join("u_avg_s1.csv").exists());
}

#[test]
fn synthesized_files_feed_a_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = json!({
        "grid": {"lx": 1.0, "ly": 1.0, "nx": 16, "ny": 16, "n_v": 4},
        "coefficients": {"phantom": {"spec": {
            "name": "checkerboard",
            "low": {"sigma_a": 1.0, "sigma_b": 0.4, "sigma_s": 0.0},
            "high": {"sigma_a": 1.4, "sigma_b": 0.6, "sigma_s": 0.0},
            "tiles": 2
        }}},
        "sources": [
            {"type": "collimated", "strength": 1.0, "angle": 0.0},
            {"type": "collimated", "strength": 0.6, "angle": 0.0}
        ],
        "solver": {"tol_fixed_point": 1e-12},
        "task": {"refinement": 1},
        "seed": 3
    });
    let synth_out = dir.path().join("synth");
    let o = tpa("synth", &write_config(dir.path(), &v), &synth_out);
    assert_eq!(
        o.status.code(),
        Some(exit::OK),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    v["task"]["data"] = json!([synth_out.join("h_s1.csv"), synth_out.join("h_s2.csv")]);
    let rec_out = dir.path().join("rec");
    let o = tpa("recon-free", &write_config(dir.path(), &v), &rec_out);
    assert_eq!(
        o.status.code(),
        Some(exit::OK),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let r = stdout_report(&o);
    assert!(r["errors"]["pair"]["masked_fraction"].as_f64().unwrap() < 0.5);
    assert!(rec_out.join("sigma_a.csv").exists() && rec_out.join("mask.csv").exists());
}

#[test]
fn verify_passes_and_repeats_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let v = json!({
        "grid": {"lx": 1.0, "ly": 1.0, "nx": 10, "ny": 10, "n_v": 8},
        "task": {"suite_size": 3},
        "seed": 11
    });
    let cfg = write_config(dir.path(), &v);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let oa = tpa("verify", &cfg, &a);
    assert_eq!(
        oa.status.code(),
        Some(exit::OK),
        "{}",
        String::from_utf8_lossy(&oa.stdout)
    );
    assert_eq!(tpa("verify", &cfg, &b).status.code(), Some(exit::OK));
    let csvs: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n.to_string_lossy().ends_with(".csv"))
        .collect();
    assert_eq!(csvs.len(), 6);
    for n in csvs {
        assert_eq!(
            fs::read(a.join(&n)).unwrap(),
            fs::read(b.join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn bundled_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for e in fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        let cfg = ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        cfg.validate(&dir)
            .unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert!(n >= 6);
}

#[test]
fn schema_lists_every_config_key() {
    let schema: Value = serde_json::from_str(
        &fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/experiment.schema.json"),
        )
        .unwrap(),
    )
    .unwrap();
    let cfg = ExperimentConfig::from_json(
        r#"{"grid": {"lx": 1, "ly": 1, "nx": 4, "ny": 4, "n_v": 4}, "seed": 0}"#,
    )
    .unwrap();
    let v = serde_json::to_value(&cfg).unwrap();
    for block in ["", "grid", "solver", "task"] {
        let (ours, theirs) = if block.is_empty() {
            (&v, &schema["properties"])
        } else {
            (&v[block], &schema["properties"][block]["properties"])
        };
        for key in ours.as_object().unwrap().keys() {
            assert!(theirs.get(key).is_some(), "schema lacks {block}.{key}");
        }
        assert_eq!(
            ours.as_object().unwrap().len(),
            theirs.as_object().unwrap().len(),
            "{block}"
        );
    }
}
