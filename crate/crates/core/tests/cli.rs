use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_phonon-herald"));
    cmd.args(args).arg("--out").arg(out).env("RUST_LOG", "warn");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_rows(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.starts_with('#')).skip(1)
}

#[test]
fn rates_with_zero_powers_are_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[power]\ncoeff_w = 0.0\ncoeff_r = 0.0\n");
    let out = dir.path().join("nested").join("out");
    let o = run(&["rates"], Some(&cfg), &out);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["rates_raw.csv", "rates_filtered.csv"] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        assert!(text.starts_with("# phonon-herald config_hash="));
        for row in data_rows(&text) {
            let cols: Vec<f64> = row.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
            assert!(cols.iter().all(|&v| v == 0.0), "{name}: {row}");
        }
    }
}

#[test]
fn simulate_is_reproducible_and_rejects_zero_shots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 5\n[campaign]\nn_shots = 2000\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["simulate"], Some(&cfg), out);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["shots.ndjson", "campaign_summary.json"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("campaign_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 5);
    assert!(summary["expected_coincidences"].as_f64().unwrap() > 0.0);

    let zero = write_config(dir.path(), "[campaign]\nn_shots = 0\n");
    let c = dir.path().join("c");
    let o = run(&["simulate"], Some(&zero), &c);
    assert!(!o.status.success());
    assert!(!c.join("shots.ndjson").exists());
    assert!(!c.join("campaign_summary.json").exists());
}

#[test]
fn seed_flag_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 5\n[campaign]\nn_shots = 500\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&["simulate"], Some(&cfg), &a).status.success());
    assert!(run(&["simulate", "--seed", "6"], Some(&cfg), &b)
        .status
        .success());
    assert_ne!(
        fs::read(a.join("shots.ndjson")).unwrap(),
        fs::read(b.join("shots.ndjson")).unwrap()
    );
}

#[test]
fn analyze_reports_truncation_and_config_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "seed = 9\n[campaign]\nn_shots = 3000\n[analysis]\nresamples = 1000\nmap_resamples = 50\n",
    );
    let out = dir.path().join("out");
    assert!(run(&["simulate"], Some(&cfg), &out).status.success());
    let o = run(&["analyze"], Some(&cfg), &out);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["map.csv", "section.csv", "analysis_summary.json"] {
        assert!(out.join(name).exists(), "{name}");
    }

    let shots = out.join("shots.ndjson");
    let text = fs::read_to_string(&shots).unwrap();
    let cut: Vec<&str> = text.lines().take(101).collect();
    let truncated = dir.path().join("truncated.ndjson");
    fs::write(&truncated, cut.join("\n") + "\n").unwrap();
    let o = run(
        &["analyze", "--shots", truncated.to_str().unwrap()],
        Some(&cfg),
        &out,
    );
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("truncated.ndjson:102"),
        "{}",
        stderr(&o)
    );

    let other = write_config(
        dir.path(),
        "seed = 9\n[campaign]\nn_shots = 3000\nmu_w = 0.3\n",
    );
    let o = run(
        &["analyze", "--shots", shots.to_str().unwrap()],
        Some(&other),
        &out,
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("config"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[campaign]\nshots = 10\n");
    let o = run(&["rates"], Some(&cfg), &dir.path().join("out"));
    assert!(!o.status.success());
}

#[test]
fn fit_round_trips_the_rate_output() {
    let dir = tempfile::tempdir().unwrap();
    let truth = write_config(dir.path(), "[power]\ncoeff_w = 1200.0\ncoeff_r = 80000.0\n");
    let out = dir.path().join("out");
    assert!(run(&["rates"], Some(&truth), &out).status.success());
    let filtered = out.join("rates_filtered.csv");

    let start = dir.path().join("start.toml");
    fs::write(
        &start,
        "[fit]\ninitial_coeff_w = 1000.0\ninitial_coeff_r = 100000.0\n",
    )
    .unwrap();
    let fit_out = dir.path().join("fit");
    let o = Command::new(env!("CARGO_BIN_EXE_phonon-herald"))
        .args(["fit", "--observed"])
        .arg(&filtered)
        .arg("--config")
        .arg(&start)
        .arg("--out")
        .arg(&fit_out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(fit_out.join("power_scale.json")).unwrap()).unwrap();
    let scale = &report["report"]["scale"];
    assert!(
        (scale["coeff_w"].as_f64().unwrap() / 1200.0 - 1.0).abs() < 1e-3,
        "{scale}"
    );
    assert!(
        (scale["coeff_r"].as_f64().unwrap() / 80000.0 - 1.0).abs() < 1e-3,
        "{scale}"
    );
    assert!(fit_out.join("fit_overlay.csv").exists());
}

#[test]
fn filter_reports_mechanical_suppression() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&["filter"], None, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("filter_summary.json")).unwrap()).unwrap();
    let db = summary["suppression_at_mechanical_db"].as_f64().unwrap();
    assert!(db > 155.0, "{db}");
    let response = fs::read_to_string(out.join("filter_response.csv")).unwrap();
    assert!(data_rows(&response).count() > 10);
}

#[test]
fn uncreatable_output_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = run(&["filter"], None, &blocker.join("out"));
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error"), "{}", stderr(&o));
}
