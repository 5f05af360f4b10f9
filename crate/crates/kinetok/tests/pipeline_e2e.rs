//! Full-pipeline smoke run: all four synthetic scenarios plus a CSV-sourced
//! asset, through every stage, with artifact and timing assertions.

use chrono::NaiveDate;
use kinetok::config::{AssetConfig, RunConfig, SyntheticSpec};
use kinetok::data::{generate_synthetic, ohlcv_to_csv, SyntheticKind, SyntheticParams};
use kinetok::pipeline::{run_pipeline, PipelineCommand};
use std::path::Path;
use std::time::Instant;

fn date(s: &str) -> NaiveDate {
    s.parse().unwrap()
}

fn synth_asset(name: &str, kind: SyntheticKind) -> AssetConfig {
    AssetConfig {
        name: name.into(),
        csv: None,
        synthetic: Some(SyntheticSpec {
            kind,
            params: SyntheticParams {
                days: 220,
                start_date: date("2022-06-01"),
                ..SyntheticParams::default()
            },
            seed: None,
        }),
    }
}

fn desk_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.assets = vec![
        synth_asset("trend", SyntheticKind::Trend),
        synth_asset("revert", SyntheticKind::MeanRevert),
        synth_asset("crash", SyntheticKind::Crash),
        synth_asset("gbm", SyntheticKind::Gbm),
    ];
    cfg.dates.train_start = date("2022-06-01");
    cfg.dates.train_end = date("2022-12-31");
    cfg.dates.test_start = date("2023-01-01");
    cfg.dates.test_end = date("2023-03-31");
    cfg.model.epochs = 2;
    cfg.model.batch_size = 16;
    cfg.seed = 23;
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn read(root: &Path, rel: &str) -> String {
    std::fs::read_to_string(root.join(rel))
        .unwrap_or_else(|e| panic!("reading {rel}: {e}"))
}

fn kv<'t>(text: &'t str, key: &str) -> &'t str {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("missing key {key}"))
}

#[test]
fn desk_scale_pipeline_completes_with_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk_config(dir.path());

    // Fifth asset: the same generator routed through a CSV file on disk.
    let series = generate_synthetic(
        SyntheticKind::Gbm,
        &SyntheticParams {
            days: 220,
            start_date: date("2022-06-01"),
            ..SyntheticParams::default()
        },
        404,
    )
    .unwrap();
    let csv_path = dir.path().join("fromfile.csv");
    std::fs::write(&csv_path, ohlcv_to_csv(&series.records)).unwrap();
    cfg.assets.push(AssetConfig {
        name: "fromfile".into(),
        csv: Some(csv_path),
        synthetic: None,
    });

    let start = Instant::now();
    for command in PipelineCommand::ALL {
        let report = run_pipeline(&cfg, command).unwrap();
        assert!(!report.artifacts.is_empty(), "{command} wrote nothing");
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 300,
        "pipeline took {elapsed:?}, budget is 5 minutes"
    );

    let names = ["trend", "revert", "crash", "gbm", "fromfile"];
    for name in names {
        for rel in [
            format!("enrich/{name}/ohlcv.csv"),
            format!("enrich/{name}/quality.txt"),
            format!("enrich/{name}/price_spline.csv"),
            format!("enrich/{name}/volume_spline.csv"),
            format!("enrich/{name}/fit.txt"),
            format!("tokenize/{name}/windows.csv"),
            format!("tokenize/{name}/tokens.csv"),
            format!("backtest/{name}/blotter.csv"),
            format!("backtest/{name}/equity.csv"),
            format!("backtest/{name}/predictions.csv"),
            format!("backtest/{name}/metrics.txt"),
            format!("sweep/{name}/tau_sweep.csv"),
            format!("sweep/{name}/bps_sweep.csv"),
            format!("diagnose/{name}/report.txt"),
            format!("diagnose/{name}/confusion.csv"),
            format!("diagnose/{name}/calibration.csv"),
        ] {
            assert!(dir.path().join(&rel).is_file(), "{rel} missing");
        }
    }
    for rel in [
        "enrich/config.toml",
        "tokenize/stats.txt",
        "train/checkpoint.bin",
        "train/training_log.csv",
        "train/report.txt",
    ] {
        assert!(dir.path().join(rel).is_file(), "{rel} missing");
    }

    // Anchoring contract: every stored window starts at the (0, 0) origin.
    for name in names {
        let windows = read(dir.path(), &format!("tokenize/{name}/windows.csv"));
        let mut rows = 0;
        for line in windows.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f[3].parse::<f64>().unwrap(), 0.0, "{name} anchored price");
            assert_eq!(f[7].parse::<f64>().unwrap(), 0.0, "{name} anchored volume");
            rows += 1;
        }
        assert!(rows > 100, "{name}: only {rows} training windows");
    }

    // Normalization stats were fitted strictly inside the training window.
    let stats = read(dir.path(), "tokenize/stats.txt");
    let data_end: NaiveDate = kv(&stats, "data_end").parse().unwrap();
    assert!(data_end < cfg.dates.test_start);
    for ch in [1, 2, 3, 5, 6, 7, 8] {
        let sigma: f64 = kv(&stats, &format!("sigma_{ch}")).parse().unwrap();
        assert!(sigma > 0.0, "channel {ch} sigma");
    }

    // The crash scenario carries its ground-truth regime tags.
    let regimes = read(dir.path(), "enrich/crash/regimes.csv");
    assert!(regimes.contains("pre-crash"));
    assert!(regimes.contains("crash-down"));

    // Per-asset simulation outputs line up with the test window.
    for name in names {
        let equity = read(dir.path(), &format!("backtest/{name}/equity.csv"));
        let days = equity.lines().count() - 1;
        assert!((60..=66).contains(&days), "{name}: {days} test days");
        let metrics = read(dir.path(), &format!("backtest/{name}/metrics.txt"));
        let final_equity: f64 = kv(&metrics, "final_equity").parse().unwrap();
        assert!(final_equity > 0.0);
        let taxes: f64 = kv(&metrics, "taxes_paid").parse().unwrap();
        assert!(taxes >= 0.0);

        // Dead-band sweep: the fraction of non-Hold labels cannot grow as
        // the band widens.
        let sweep = read(dir.path(), &format!("sweep/{name}/tau_sweep.csv"));
        let rates: Vec<f64> = sweep
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(rates.len(), 4);
        for pair in rates.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "{name}: tau sweep rose {rates:?}");
        }

        let report = read(dir.path(), &format!("diagnose/{name}/report.txt"));
        for key in [
            "action_rate",
            "equilibrium_flagged",
            "dominant_class",
            "calibration_max_gap",
        ] {
            assert!(report.contains(&format!("{key} = ")), "{name}: {key}");
        }
    }

    // The training log has one row per epoch with a decaying learning rate.
    let log = read(dir.path(), "train/training_log.csv");
    let lrs: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(lrs.len(), cfg.model.epochs);
    assert!(lrs.windows(2).all(|p| p[1] < p[0]));
}
