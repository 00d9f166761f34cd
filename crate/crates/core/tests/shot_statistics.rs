mod common;

use phonon_herald::correlation::{
    BootstrapOptions, JointCounts, PairEstimate, ShotSet, WindowSpec,
};
use phonon_herald::shots::{
    read_shot_file, run_campaign, simulate_campaign, CampaignConfig, ChannelWindows, ShotModel,
    ShotRecord,
};
use phonon_herald::Error;

/// Windows wide enough to catch every write and every read photon.
fn full_windows(config: &CampaignConfig) -> (WindowSpec, WindowSpec) {
    let w = ChannelWindows::from_schedule(&config.schedule).unwrap();
    let len = config.schedule.shot_length_us;
    let write = WindowSpec::new(
        0.5 * (w.write.start_us + w.read.start_us),
        w.read.start_us - w.write.start_us,
    )
    .unwrap();
    let read = WindowSpec::new(0.5 * (w.read.start_us + len), len - w.read.start_us).unwrap();
    (write, read)
}

fn estimate(records: &[ShotRecord], w1: &WindowSpec, w2: &WindowSpec) -> PairEstimate {
    let shots = ShotSet::new(records);
    PairEstimate::compute(
        &JointCounts::collect(&shots, w1, w2),
        &BootstrapOptions {
            resamples: 1000,
            seed: 3,
        },
    )
}

#[test]
fn worker_count_does_not_change_shots() {
    let config = common::calibrated_low_gain(3000, 11);
    let one = simulate_campaign(&config, 1).unwrap();
    let four = simulate_campaign(&config, 4).unwrap();
    assert_eq!(one, four);
    assert!(one
        .iter()
        .enumerate()
        .all(|(i, s)| s.shot_index == i as u64));
}

#[test]
fn ideal_pairs_reach_the_bose_cross_correlation() {
    let mu = 0.1;
    let config = common::ideal_pairs(mu, 100_000, 12);
    let (w1, w2) = full_windows(&config);
    let records = simulate_campaign(&config, 1).unwrap();
    let est = estimate(&records, &w1, &w2);
    let g = est.g12().unwrap();
    let expected = common::bose_cross_g2(mu);
    assert!(
        (g.value - expected).abs() <= 3.0 * g.err,
        "{} ± {} vs {expected}",
        g.value,
        g.err
    );
    // Every write photon has its read partner in the full windows.
    let m = est.moments;
    assert_eq!(m.s1, m.s2);
}

#[test]
fn detected_counts_are_linear_in_efficiency() {
    let etas = [0.1, 0.2, 0.4, 0.8];
    let means: Vec<f64> = etas
        .iter()
        .map(|&eta| {
            let mut c = common::ideal_pairs(0.5, 40_000, 13);
            c.eta_w = eta;
            let (w1, _) = full_windows(&c);
            let shots = ShotSet::new(&simulate_campaign(&c, 1).unwrap());
            (0..shots.len())
                .map(|i| shots.count(i, w1.start(), w1.end()) as f64)
                .sum::<f64>()
                / shots.len() as f64
        })
        .collect();
    // Least-squares slope of log(mean) against log(eta).
    let xs: Vec<f64> = etas.iter().map(|e: &f64| e.ln()).collect();
    let ys: Vec<f64> = means.iter().map(|m| m.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((slope - 1.0).abs() < 0.02, "slope {slope}, means {means:?}");
}

#[test]
fn cross_correlation_survives_loss() {
    let lossless = {
        let mut c = common::ideal_pairs(0.2, 60_000, 14);
        c.eta_w = 0.9;
        c.eta_r = 0.9;
        c
    };
    let lossy = CampaignConfig {
        eta_w: 0.1,
        eta_r: 0.1,
        master_seed: 15,
        ..lossless.clone()
    };
    let (w1, w2) = full_windows(&lossless);
    let a = estimate(&simulate_campaign(&lossless, 1).unwrap(), &w1, &w2)
        .g12()
        .unwrap();
    let b = estimate(&simulate_campaign(&lossy, 1).unwrap(), &w1, &w2)
        .g12()
        .unwrap();
    assert!(
        (a.value - b.value).abs() <= 3.0 * a.err.hypot(b.err),
        "{a:?} vs {b:?}"
    );
}

#[test]
fn background_alone_is_uncorrelated() {
    let mut config = common::calibrated_low_gain(100_000, 16);
    config.mu_w = 0.0;
    config.n_residual = 0.0;
    config.thermal_admix = 0.0;
    config.storage_delay_us = 0.0;
    config.eta_w = 1.0;
    config.eta_r = 1.0;
    assert_eq!(config.thermal_additions_mean(), 0.0);
    let (w1, w2) = full_windows(&config);
    let est = estimate(&simulate_campaign(&config, 1).unwrap(), &w1, &w2);
    let g = est.g12().unwrap();
    let (g11, g22) = est.autocorrelations().unwrap();
    for (name, e) in [("cross", g), ("write auto", g11), ("read auto", g22)] {
        assert!((e.value - 1.0).abs() <= 4.0 * e.err, "{name}: {e:?}");
    }
}

#[test]
fn thermal_readout_is_bunched() {
    let mut config = common::ideal_pairs(0.0, 100_000, 17);
    config.thermal_admix = 1.0;
    let (_, w2) = full_windows(&config);
    let est = estimate(&simulate_campaign(&config, 1).unwrap(), &w2, &w2);
    let (g, _) = est.autocorrelations().unwrap();
    assert!((g.value - 2.0).abs() <= 4.0 * g.err, "{g:?}");
}

#[test]
fn background_histogram_follows_the_rate_model() {
    let mut config = common::calibrated_low_gain(40_000, 18);
    config.mu_w = 0.0;
    config.n_residual = 0.0;
    config.thermal_admix = 0.0;
    config.storage_delay_us = 0.0;
    config.eta_w = 1.0;
    config.eta_r = 1.0;
    assert_eq!(config.thermal_additions_mean(), 0.0);
    let model = ShotModel::new(&config).unwrap();
    let records = simulate_campaign(&config, 1).unwrap();
    let bin = 50.0;
    let bins = (config.schedule.shot_length_us / bin) as usize;
    let mut hist = vec![0.0; bins];
    for t in records.iter().flat_map(|r| &r.timestamps) {
        hist[((t / bin) as usize).min(bins - 1)] += 1.0;
    }
    for (k, &count) in hist.iter().enumerate() {
        let a = k as f64 * bin;
        let expected = config.n_shots as f64 * model.expected_background(a, a + bin);
        // Quantisation moves a count across a bin edge by at most 0.1 µs.
        let slack = 5.0 * expected.max(1.0).sqrt() + 0.01 * expected;
        assert!(
            (count - expected).abs() <= slack,
            "bin {a} µs: {count} vs {expected}"
        );
    }
}

#[test]
fn summary_coincidences_match_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shots.ndjson");
    let config = common::calibrated_low_gain(100_000, 19);
    let summary = run_campaign(&config, &path, 1).unwrap();
    let file = read_shot_file(&path, Some(config.n_shots)).unwrap();
    assert_eq!(file.header.config_hash, config.hash());

    // Spread of the per-shot product gives the standard error of the sum.
    let (a, b) = (summary.write_window.start_us, summary.write_window.end_us);
    let (c, d) = (
        summary.read_window.start_us,
        summary.read_window.end_us + 0.1,
    );
    let shots = ShotSet::new(&file.shots);
    let products: Vec<f64> = (0..shots.len())
        .map(|i| (shots.count(i, a, b) * shots.count(i, c, d)) as f64)
        .collect();
    let n = products.len() as f64;
    let mean = products.iter().sum::<f64>() / n;
    let var = products.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert_eq!(products.iter().sum::<f64>(), summary.coincidences as f64);
    let se = (var * n).sqrt();
    let diff = summary.coincidences as f64 - summary.expected_coincidences;
    assert!(
        diff.abs() <= 4.0 * se,
        "{} vs {} (se {se})",
        summary.coincidences,
        summary.expected_coincidences
    );
}

#[test]
fn model_correlations_predict_the_simulation() {
    let config = common::calibrated_low_gain(400_000, 20);
    let model = ShotModel::new(&config).unwrap();
    let w1 = WindowSpec::new(819.4, 100.0).unwrap();
    let w2 = WindowSpec::new(975.0, 100.0).unwrap();
    let expected = model.expected_correlations((w1.start(), w1.end()), (w2.start(), w2.end()));
    let est = estimate(&simulate_campaign(&config, 1).unwrap(), &w1, &w2);
    let g = est.g12().unwrap();
    let (g11, g22) = est.autocorrelations().unwrap();
    for (name, e, x) in [
        ("wr", g, expected.g2_wr),
        ("ww", g11, expected.g2_ww),
        ("rr", g22, expected.g2_rr),
    ] {
        assert!(
            (e.value - x).abs() <= 4.0 * e.err,
            "{name}: {} ± {} vs {x}",
            e.value,
            e.err
        );
    }
}

#[test]
fn corrupt_and_truncated_files_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shots.ndjson");
    let config = common::calibrated_low_gain(50, 21);
    run_campaign(&config, &path, 1).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();

    let truncated = dir.path().join("truncated.ndjson");
    std::fs::write(&truncated, lines[..30].join("\n") + "\n").unwrap();
    let err = read_shot_file(&truncated, Some(50)).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 31, .. }), "{err}");

    let corrupt = dir.path().join("corrupt.ndjson");
    let mut broken: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
    broken[7] = "{\"shot\": 6, \"ts\": [1.0,".into();
    std::fs::write(&corrupt, broken.join("\n") + "\n").unwrap();
    let err = read_shot_file(&corrupt, Some(50)).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 8, .. }), "{err}");

    let version = dir.path().join("version.ndjson");
    let mut other = broken.clone();
    other[0] = lines[0].replace("/v1", "/v2");
    std::fs::write(&version, other.join("\n") + "\n").unwrap();
    let err = read_shot_file(&version, None).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
}

#[test]
fn zero_shots_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shots.ndjson");
    let config = common::calibrated_low_gain(0, 22);
    assert!(run_campaign(&config, &path, 1).is_err());
    assert!(!path.exists());
    assert!(!dir.path().join("shots.ndjson.partial").exists());
}
