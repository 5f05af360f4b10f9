//! End-to-end checks of the binary: exit codes per error class, stage
//! chaining, and flag overrides.

use std::path::Path;
use std::process::Command;

fn kinetok() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kinetok"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

/// A config small enough that enrich + tokenize finish in seconds.
fn tiny_config(out: &Path) -> String {
    format!(
        r#"
seed = 11
output_dir = "{}"

[[assets]]
name = "gbm"
[assets.synthetic]
kind = "gbm"
[assets.synthetic.params]
days = 90
start_date = "2022-08-01"

[dates]
train_start = "2022-08-01"
train_end = "2022-12-31"
test_start = "2023-01-01"
test_end = "2023-03-31"

[model]
context = 8
epochs = 1
"#,
        out.display()
    )
}

#[test]
fn missing_subcommand_and_help_behave() {
    let out = kinetok().output().unwrap();
    assert!(!out.status.success());
    let help = kinetok().arg("--help").output().unwrap();
    assert!(help.status.success());
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["enrich", "tokenize", "train", "backtest", "sweep", "diagnose"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn config_errors_exit_2_and_parse_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    write(&bad, "this is not valid = = toml");
    let out = kinetok().args(["enrich", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{out:?}");

    // A malformed CSV asset surfaces as a parse error with its line number.
    let csv = dir.path().join("prices.csv");
    write(&csv, "date,open,high,low,close,volume\n2023-01-03,100,105,99,oops,1\n");
    let cfg = dir.path().join("run.toml");
    write(
        &cfg,
        &format!(
            "output_dir = \"{}\"\n[[assets]]\nname = \"real\"\ncsv = \"prices.csv\"\n",
            dir.path().join("runs").display()
        ),
    );
    let out = kinetok().args(["enrich", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{out:?}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn temporal_cutoff_violation_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    write(
        &cfg,
        r#"
[[assets]]
name = "gbm"
[assets.synthetic]
kind = "gbm"
[dates]
train_end = "2023-06-30"
test_start = "2023-01-01"
test_end = "2023-12-31"
"#,
    );
    let out = kinetok().args(["enrich", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(5), "{out:?}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("temporal cutoff"));
}

#[test]
fn missing_dependency_exits_7_and_names_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    write(&cfg, &tiny_config(&dir.path().join("runs")));
    let out = kinetok().args(["tokenize", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(7), "{out:?}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("kinetok enrich"));
}

#[test]
fn stages_chain_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    write(&cfg, &tiny_config(&dir.path().join("ignored")));
    let out_dir = dir.path().join("runs");

    for stage in ["enrich", "tokenize"] {
        let out = kinetok()
            .args([stage, "--config"])
            .arg(&cfg)
            .args(["--seed", "11", "--out"])
            .arg(&out_dir)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{stage}: {out:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("ok"));
    }
    // --out overrode the config's output_dir.
    assert!(out_dir.join("enrich/gbm/ohlcv.csv").is_file());
    assert!(out_dir.join("tokenize/stats.txt").is_file());
    assert!(!dir.path().join("ignored").exists());

    // A different --seed is parameter drift for downstream stages.
    let out = kinetok()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--seed", "99", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(7), "{out:?}");
}
