use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> (i32, Value, Output) {
    let out = Command::new(env!("CARGO_BIN_EXE_unimodal")).args(args).output().unwrap();
    let json = serde_json::from_slice(&out.stdout).unwrap_or(Value::Null);
    (out.status.code().unwrap_or(-1), json, out)
}

fn ulam() -> String {
    configs().join("ulam.json").display().to_string()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn partition_reports_the_ulam_orbit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let (code, summary, _) = run(&["partition", "-c", &ulam(), "--output-dir", d]);
    assert_eq!(code, 0);
    assert_eq!(summary["checks_passed"], true);
    let p = read_json(&dir.path().join("partition.json"));
    assert_eq!(p["schema_version"], 1);
    assert_eq!(p["partition"]["intervals"].as_array().unwrap().len(), 2);
    assert!((p["critical_point"].as_f64().unwrap() - 0.5).abs() < 1e-14);
}

#[test]
fn density_csv_has_header_and_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let (code, _, _) = run(&["density", "-c", &ulam(), "--output-dir", d, "--density-points", "9"]);
    assert_eq!(code, 0);
    let mut rdr = csv::Reader::from_path(dir.path().join("density.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["x", "rho"]);
    let rows: Vec<(f64, f64)> = rdr.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 9);
    for (x, rho) in rows {
        assert!((rho - 1.0 / (std::f64::consts::PI * (x * (1.0 - x)).sqrt())).abs() < 1e-8);
    }
    let s = read_json(&dir.path().join("spectrum.json"));
    assert!((s["eigenvalues"][1]["re"].as_f64().unwrap() - 0.25).abs() < 1e-8);
}

#[test]
fn psi_outputs_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let (code, _, _) = run(&["psi", "-c", &ulam(), "--output-dir", d.path().to_str().unwrap(), "--grid", r#"{"kind":"circle","n":16,"radius":0.9}"#]);
        assert_eq!(code, 0);
    }
    let mut names: Vec<String> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert!(names.contains(&"psi_0.csv".to_string()) && names.contains(&"psi_index.json".to_string()));
    for n in &names {
        assert_eq!(std::fs::read(a.path().join(n)).unwrap(), std::fs::read(b.path().join(n)).unwrap(), "{n} differs");
    }
    let mut rdr = csv::Reader::from_path(a.path().join("psi_0.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["re_lambda", "im_lambda", "re_psi", "im_psi", "flag"]);
    assert_eq!(rdr.records().count(), 16);
}

#[test]
fn verify_passes_on_ulam() {
    let (code, summary, _) = run(&["verify", "-c", &ulam()]);
    assert_eq!(code, 0, "{summary}");
    assert_eq!(summary["passed"], true);
    assert_eq!(summary["n_failed"], 0);
}

#[test]
fn low_degree_fails_the_convergence_check() {
    let (code, summary, _) = run(&["verify", "-c", &ulam(), "--degree", "8"]);
    assert_eq!(code, 1);
    let failed: Vec<&str> = summary["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"eigenvalue_degree_convergence"), "{failed:?}");
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p.display().to_string()
    };
    let cases = [
        write("empty.json", "{}"),
        write("broken.json", "{\"map\": "),
        write("unknown.json", r#"{"map":{"family":"logistic","lambda":4.0},"colour":1}"#),
        write("degree.json", r#"{"map":{"family":"logistic","lambda":4.0},"degree":3}"#),
    ];
    for c in &cases {
        let (code, summary, _) = run(&["spectrum", "-c", c]);
        assert_eq!(code, 2, "{c}: {summary}");
        assert_eq!(summary["passed"], false);
    }
    let (code, _, _) = run(&["spectrum", "-c", &dir.path().join("missing.json").display().to_string()]);
    assert_eq!(code, 2);
    let (code, _, _) = run(&["frobnicate"]);
    assert_eq!(code, 2);
}

#[test]
fn domain_errors_exit_with_one() {
    let (code, summary, _) = run(&["verify", "--logistic", "3.7"]);
    assert_eq!(code, 1);
    assert_eq!(summary["error"], "OrbitNotFinite");
    let bm = configs().join("band_merging.json").display().to_string();
    let (code, summary, _) = run(&["verify", "-c", &bm]);
    assert_eq!(code, 1);
    assert_eq!(summary["error"], "NotMixing");
    assert_eq!(summary["stage"], "map_model");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let (code, _, _) = run(&["poles", "-c", &ulam(), "--output-dir", d, "--x", "x", "--a", "[0,0,0,1]", "--n-keep", "4"]);
    assert_eq!(code, 0);
    let poles = read_json(&dir.path().join("poles.json"));
    let sets = poles["sets"].as_array().unwrap();
    assert_eq!(sets.len(), 1);
    assert_eq!(sets[0]["x"], "x");
    assert_eq!(poles["big_lambda"], 2.0);
}
