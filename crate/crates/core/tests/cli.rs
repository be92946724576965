use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use coda_forecast::io::{ingest, read_panel, write_panel, LabelOrder, RunManifest};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_coda-forecast"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn base_args<'a>(cmd: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![cmd, "--input", FIXTURE.get_or_init(|| fixture("hcd_synthetic.csv").display().to_string()), "--sex", "f", "--out-dir", out]
}

static FIXTURE: std::sync::OnceLock<String> = std::sync::OnceLock::new();

/// Data rows of an emitted CSV, skipping the provenance comments and header.
fn data_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn ingest_matches_independent_marginals() {
    let text = fs::read_to_string(fixture("hcd_marginals.csv")).unwrap();
    let mut expected: HashMap<(String, String, String), f64> = HashMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        expected.insert((f[0].into(), f[1].into(), f[2].into()), f[3].parse().unwrap());
    }
    for sex in ["f", "m"] {
        let (panel, report) = ingest(&fixture("hcd_synthetic.csv"), Some(sex), None).unwrap();
        assert_eq!(panel.n_years(), 16);
        assert_eq!(panel.n_parts(), 40);
        assert_eq!(report.rows_other_sex, 640);
        let mut got: HashMap<(String, String, String), f64> = HashMap::new();
        for (t, year) in panel.years().iter().enumerate() {
            for (u, age) in panel.age_bands().iter().enumerate() {
                for (c, cause) in panel.causes().iter().enumerate() {
                    let d = panel.count(t, u, c);
                    for key in [("year", year.to_string()), ("age_band", age.clone()), ("cause", cause.clone())] {
                        *got.entry((sex.into(), key.0.into(), key.1)).or_default() += d;
                    }
                }
            }
        }
        for (key, v) in &got {
            assert_eq!(expected[key], *v, "{key:?}");
        }
        assert_eq!(got.len(), 16 + 8 + 5);
    }
}

#[test]
fn ingest_emit_reingest_is_lossless() {
    let (panel, _) = ingest(&fixture("hcd_synthetic.csv"), Some("m"), None).unwrap();
    let manifest: RunManifest = serde_json::from_value(serde_json::json!({
        "command": "export", "input": "hcd_synthetic.csv", "sex": "m", "order": null, "totals": null,
        "transform": "clr", "alpha_grid": [], "zeros": "none", "horizon": 1, "n_test": 1, "n_folds": 1,
        "criterion": "mae", "score_on": "densities", "methods": [], "n_boot": 100, "coverage": 0.9,
        "seed": 0, "out_dir": ".", "global_factor": false, "reclose_bands": false
    }))
    .unwrap();
    let mut buf = Vec::new();
    write_panel(&panel, &mut buf, &manifest).unwrap();
    let (back, _) = read_panel(buf.as_slice(), None, &LabelOrder::default()).unwrap();
    assert_eq!(back, panel);
}

#[test]
fn forecast_outputs_and_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fc").display().to_string();
    let mut args = base_args("forecast", &out);
    args.extend(["--transform", "alpha", "--alpha", "0.3", "--horizon", "5"]);
    let (code, stdout, stderr) = run(&args);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("forecast.csv"));

    let forecast = Path::new(&out).join("forecast.csv");
    let first = fs::read(&forecast).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# coda-forecast "));
    assert!(lines.next().unwrap().starts_with("# manifest: {"));
    assert_eq!(lines.next().unwrap(), "year,age_band,cause,density");

    let rows = data_rows(&forecast);
    assert_eq!(rows.len(), 5 * 40);
    let mut sums: HashMap<String, f64> = HashMap::new();
    for r in &rows {
        *sums.entry(r[0].clone()).or_default() += r[3].parse::<f64>().unwrap();
    }
    assert_eq!(sums.len(), 5);
    assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-10));
    assert_eq!(rows[0][0], "2017");

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&out).join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["manifest"]["transform"], "alpha:0.3");
    assert!(!manifest["ingest"]["zero_cells"].as_array().unwrap().is_empty());

    let before: Vec<Vec<u8>> = ["forecast.csv", "clamps.csv", "manifest.json"]
        .iter()
        .map(|f| fs::read(Path::new(&out).join(f)).unwrap())
        .collect();
    assert_eq!(run(&args).0, 0);
    for (f, old) in ["forecast.csv", "clamps.csv", "manifest.json"].iter().zip(before) {
        assert_eq!(fs::read(Path::new(&out).join(f)).unwrap(), old, "{f} changed between runs");
    }
}

#[test]
fn forecast_with_totals_adds_counts() {
    let dir = tempfile::tempdir().unwrap();
    let totals = dir.path().join("totals.csv");
    fs::write(&totals, "year,total\n2017,1000\n2018,2000\n").unwrap();
    let out = dir.path().join("fc").display().to_string();
    let totals_arg = totals.display().to_string();
    let mut args = base_args("forecast", &out);
    args.extend(["--horizon", "2", "--totals", &totals_arg]);
    let (code, _, stderr) = run(&args);
    assert_eq!(code, 0, "{stderr}");
    for r in data_rows(&Path::new(&out).join("forecast.csv")) {
        let total = if r[0] == "2017" { 1000.0 } else { 2000.0 };
        let (d, n): (f64, f64) = (r[3].parse().unwrap(), r[4].parse().unwrap());
        assert!((n - d * total).abs() < 1e-9);
    }
}

#[test]
fn evaluate_clr_and_ilr_rows_match() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ev").display().to_string();
    let mut args = base_args("evaluate", &out);
    args.extend(["--methods", "clr:omit,ilr:omit,alpha:0.5"]);
    let (code, _, stderr) = run(&args);
    assert_eq!(code, 0, "{stderr}");
    let rows = data_rows(&Path::new(&out).join("methods_table.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][0], "CLR (zeros omitted)");
    assert_eq!(rows[1][0], "ILR (zeros omitted)");
    assert_eq!(rows[0][1..], rows[1][1..]);
}

#[test]
fn tune_with_singleton_grid_picks_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tune").display().to_string();
    let mut args = base_args("tune", &out);
    args.extend(["--alpha-grid", "0.3", "--criterion", "rmse"]);
    let (code, _, stderr) = run(&args);
    assert_eq!(code, 0, "{stderr}");
    let chosen = fs::read_to_string(Path::new(&out).join("chosen_alpha")).unwrap();
    assert_eq!(chosen.lines().last().unwrap(), "0.3");
    let grid = data_rows(&Path::new(&out).join("alpha_grid.csv"));
    assert_eq!(grid.len(), 1);
    assert_eq!(grid[0].len(), 3 + 2 * 4);
    let plan: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&out).join("fold_plan.json")).unwrap()).unwrap();
    assert_eq!(plan["fold_plan"]["folds"][0]["train_years"].as_array().unwrap().len(), 8);
}

#[test]
fn intervals_and_plotdata() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("iv").display().to_string();
    let mut args = base_args("intervals", &out);
    args.extend(["--n-boot", "100", "--horizon", "2", "--seed", "9"]);
    let (code, _, stderr) = run(&args);
    assert_eq!(code, 0, "{stderr}");
    let rows = data_rows(&Path::new(&out).join("intervals.csv"));
    assert_eq!(rows.len(), 2 * 40);
    for r in &rows {
        let v: Vec<f64> = r[3..].iter().map(|x| x.parse().unwrap()).collect();
        assert!(v.iter().all(|x| *x >= 0.0));
        assert!(v[0] <= v[2]);
    }

    let mut args = base_args("plotdata", &out);
    args.extend(["--horizon", "3"]);
    assert_eq!(run(&args).0, 0);
    let rows = data_rows(&Path::new(&out).join("plotdata.csv"));
    let count = |s: &str| rows.iter().filter(|r| r[0] == s).count();
    assert_eq!(count("observed"), 16 * 5);
    assert_eq!(count("fitted"), 16 * 5);
    assert_eq!(count("forecast"), 3 * 5);
}

#[test]
fn exit_codes_by_error_family() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x").display().to_string();

    let dup = dir.path().join("dup.csv");
    fs::write(&dup, "year,age_band,cause,sex,deaths\n2000,a,x,f,1\n2000,a,x,f,2\n").unwrap();
    let dup_arg = dup.display().to_string();
    let (code, _, stderr) = run(&["forecast", "--input", &dup_arg, "--out-dir", &out]);
    assert_eq!(code, 2);
    assert!(stderr.contains("duplicate cell at line 3"));

    let mut args = base_args("forecast", &out);
    args.extend(["--transform", "alpha", "--alpha", "1.5"]);
    assert_eq!(run(&args).0, 3);

    let mut args = base_args("forecast", &out);
    args.extend(["--transform", "clr"]);
    let (code, _, stderr) = run(&args);
    assert_eq!(code, 4);
    assert!(stderr.contains("[transform]"), "{stderr}");

    let (code, _, _) = run(&["forecast", "--input", "/nonexistent/panel.csv", "--out-dir", &out]);
    assert_eq!(code, 5);

    assert_eq!(run(&["forecast", "--bogus"]).0, 3);
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn thread_cap_gives_identical_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("iv").display().to_string();
    let mut args = base_args("intervals", &out);
    args.extend(["--n-boot", "100", "--horizon", "1"]);
    assert_eq!(run(&args).0, 0);
    let parallel = fs::read(Path::new(&out).join("intervals.csv")).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_coda-forecast"))
        .args(&args)
        .env("CODA_THREADS", "1")
        .output()
        .unwrap();
    assert!(status.status.success());
    assert_eq!(fs::read(Path::new(&out).join("intervals.csv")).unwrap(), parallel);
    let status = Command::new(env!("CARGO_BIN_EXE_coda-forecast"))
        .args(&args)
        .env("CODA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(3));
}
