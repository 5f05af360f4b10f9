//! Stage orchestration: artifact directories, manifests, and the leakage
//! guard.
//!
//! Each command runs one stage and writes its outputs under
//! `<output_dir>/<stage>/`, finishing with a `manifest.txt` that records the
//! parameters the stage ran with, the content hashes of every input it read,
//! and the hashes of every artifact it wrote. Downstream stages read their
//! inputs back from disk, so a missing prerequisite surfaces as a dependency
//! error naming the command to run first, and a parameter drift between
//! stages surfaces before any work happens.
//!
//! The temporal cutoff is enforced twice: `tokenize` fits normalization
//! statistics and training windows only on data dated up to `train_end`, and
//! `backtest` re-reads the recorded fit range from the manifests and refuses
//! to run (leakage error) unless it ends strictly before `test_start`.
//!
//! Every file write is atomic (temp file + rename) and every byte emitted is
//! a pure function of (config, seed): reruns are byte-identical.

use crate::backtest::{
    run_backtest, BacktestResult, CostModel, Regime, TaxSchedule, TradeSide,
};
use crate::config::{RunConfig, SyntheticSpec};
use crate::data::{
    generate_synthetic, ohlcv_to_csv, parse_ohlcv_csv, to_log_series, tokens_to_csv, LogSeries,
    OhlcvRecord, RegimeTag,
};
use crate::diagnostics::{
    action_distribution, bps_sweep, break_even_bps, calibration_curve, confusion_matrix,
    detect_liquidation_equilibrium, tau_sweep, SweepResult,
};
use crate::enrichment::{fit_aggregate_spline, fit_snapshot_spline};
use crate::error::{Error, Result};
use crate::labeling::{label_dataset, ActionLabel, LabeledWindow, LossWeights, Threshold};
use crate::model::{
    checkpoint_from_bytes, checkpoint_to_bytes, predict_action, train, ModelParameters,
};
use crate::series::{AggregateSeries, NoiseRatio, SnapshotSeries, TimeGrid};
use crate::tokenizer::{
    compute_global_stats, rolling_tokenize, zscore_normalize, JointToken, NormStats, TokenWindow,
    TOKEN_DIM,
};
use chrono::NaiveDate;
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};

/// Dead-band sweep axis (fractions of log return).
pub const TAU_SWEEP_AXIS: [f64; 4] = [0.0025, 0.005, 0.01, 0.02];
/// Cost sweep axis (basis points per side).
pub const BPS_SWEEP_AXIS: [f64; 4] = [0.0, 5.0, 10.0, 20.0];
const CALIBRATION_BINS: usize = 10;

/// The six pipeline stages, in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineCommand {
    Enrich,
    Tokenize,
    Train,
    Backtest,
    Sweep,
    Diagnose,
}

impl PipelineCommand {
    pub const ALL: [PipelineCommand; 6] = [
        PipelineCommand::Enrich,
        PipelineCommand::Tokenize,
        PipelineCommand::Train,
        PipelineCommand::Backtest,
        PipelineCommand::Sweep,
        PipelineCommand::Diagnose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PipelineCommand::Enrich => "enrich",
            PipelineCommand::Tokenize => "tokenize",
            PipelineCommand::Train => "train",
            PipelineCommand::Backtest => "backtest",
            PipelineCommand::Sweep => "sweep",
            PipelineCommand::Diagnose => "diagnose",
        }
    }
}

impl fmt::Display for PipelineCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PipelineCommand {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PipelineCommand::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown command '{s}' (expected enrich | tokenize | train | backtest | sweep | diagnose)"
                ))
            })
    }
}

/// What a stage produced, for CLI reporting.
#[derive(Debug)]
pub struct StageReport {
    pub stage: PipelineCommand,
    /// Absolute paths of every file written (manifest last).
    pub artifacts: Vec<PathBuf>,
    /// Human-readable key figures.
    pub summary: Vec<(String, String)>,
}

/// Run one pipeline stage against a validated config.
pub fn run_pipeline(config: &RunConfig, command: PipelineCommand) -> Result<StageReport> {
    config.validate()?;
    match command {
        PipelineCommand::Enrich => run_enrich(config),
        PipelineCommand::Tokenize => run_tokenize(config),
        PipelineCommand::Train => run_train(config),
        PipelineCommand::Backtest => run_backtest_stage(config),
        PipelineCommand::Sweep => run_sweep(config),
        PipelineCommand::Diagnose => run_diagnose(config),
    }
}

// ---------------------------------------------------------------------------
// Hashing, atomic writes, manifests

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write via a temp file in the same directory, then rename into place.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path
        .parent()
        .ok_or_else(|| Error::Config(format!("path {} has no parent", path.display())))?;
    std::fs::create_dir_all(parent)?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("bad file name in {}", path.display())))?;
    let tmp = parent.join(format!(".tmp.{name}"));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Per-stage provenance record: parameters, input hashes, artifact hashes.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub stage: String,
    pub params: Vec<(String, String)>,
    pub inputs: Vec<(String, String)>,
    pub artifacts: Vec<(String, String)>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = format!("stage = {}\n", self.stage);
        for (k, v) in &self.params {
            out.push_str(&format!("param {k} = {v}\n"));
        }
        for (k, v) in &self.inputs {
            out.push_str(&format!("input {k} = {v}\n"));
        }
        for (k, v) in &self.artifacts {
            out.push_str(&format!("artifact {k} = {v}\n"));
        }
        out
    }

    /// Parse a rendered manifest. Panic-free on arbitrary text.
    pub fn parse(text: &str) -> Result<Manifest> {
        let mut stage = None;
        let mut params = Vec::new();
        let mut inputs = Vec::new();
        let mut artifacts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Parse {
                line: i + 1,
                msg: format!("{msg}: '{line}'"),
            };
            if let Some(rest) = line.strip_prefix("stage = ") {
                stage = Some(rest.to_string());
                continue;
            }
            let (kind, rest) = line.split_once(' ').ok_or_else(|| err("manifest line"))?;
            let (key, value) = rest
                .split_once(" = ")
                .ok_or_else(|| err("manifest entry"))?;
            let entry = (key.to_string(), value.to_string());
            match kind {
                "param" => params.push(entry),
                "input" => inputs.push(entry),
                "artifact" => artifacts.push(entry),
                _ => return Err(err("unknown manifest entry kind")),
            }
        }
        Ok(Manifest {
            stage: stage.ok_or(Error::Parse {
                line: 0,
                msg: "manifest missing stage line".into(),
            })?,
            params,
            inputs,
            artifacts,
        })
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

// ---------------------------------------------------------------------------
// Stage parameter fingerprints

fn source_string(config: &RunConfig, index: usize) -> String {
    let asset = &config.assets[index];
    match (&asset.csv, &asset.synthetic) {
        (Some(path), _) => format!("csv:{}", path.display()),
        (_, Some(spec)) => {
            let resolved = SyntheticSpec {
                seed: Some(config.asset_seed(index)),
                ..spec.clone()
            };
            // JSON keeps the full parameter set on one deterministic line.
            format!(
                "synthetic:{}",
                serde_json::to_string(&resolved).unwrap_or_default()
            )
        }
        _ => String::new(),
    }
}

/// The parameters that determine a stage's artifacts. A dependent stage
/// recomputes its prerequisite's fingerprint and compares it against the
/// stored manifest; any drift means the artifacts must be rebuilt.
fn stage_params(config: &RunConfig, command: PipelineCommand) -> Vec<(String, String)> {
    let mut p: Vec<(String, String)> = Vec::new();
    let mut add = |k: &str, v: String| p.push((k.to_string(), v));
    // Enrich scope: data sources and the fit's noise ratio.
    for (i, asset) in config.assets.iter().enumerate() {
        add(&format!("source_{}", asset.name), source_string(config, i));
    }
    add("alpha", format!("{}", config.tokenizer.alpha));
    add("train_start", config.dates.train_start.to_string());
    add("test_end", config.dates.test_end.to_string());
    if command == PipelineCommand::Enrich {
        return p;
    }
    // Tokenize scope: windowing, labeling, and the training cutoff.
    add("kind", format!("{:?}", config.tokenizer.kind).to_lowercase());
    add("tau", format!("{}", config.labels.tau));
    add("window", format!("{}", config.model.context));
    add("train_end", config.dates.train_end.to_string());
    if command == PipelineCommand::Tokenize {
        return p;
    }
    // Train scope: the model and the run seed that drives init/shuffling.
    let mut mc = config.model;
    mc.seed = config.seed;
    add(
        "model",
        serde_json::to_string(&mc).unwrap_or_default(),
    );
    add(
        "loss_weights",
        format!("{:?}", config.labels.loss_weights),
    );
    if command == PipelineCommand::Train {
        return p;
    }
    // Backtest scope: execution settings and the test window.
    add("test_start", config.dates.test_start.to_string());
    add("cost_bps", format!("{}", config.backtest.cost_bps));
    add("tax_rate", format!("{}", config.backtest.tax_rate));
    add(
        "tax_period_days",
        format!("{}", config.backtest.tax_period_days),
    );
    add(
        "initial_capital",
        format!("{}", config.backtest.initial_capital),
    );
    p
}

/// The fingerprint a dependent stage expects its prerequisite to carry.
fn check_fingerprint(
    config: &RunConfig,
    manifest: &Manifest,
    prior: PipelineCommand,
) -> Result<()> {
    for (k, want) in stage_params(config, prior) {
        match manifest.param(&k) {
            Some(have) if have == want => {}
            Some(have) => {
                return Err(Error::Dependency(format!(
                    "{} artifacts were built with {k} = {have}, but this config has {k} = {want}; \
                     re-run `kinetok {}` first",
                    prior, prior
                )))
            }
            None => {
                return Err(Error::Dependency(format!(
                    "{} manifest lacks parameter {k}; re-run `kinetok {}` first",
                    prior, prior
                )))
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage builder

struct Stage<'a> {
    config: &'a RunConfig,
    command: PipelineCommand,
    /// Files to write, paths relative to the stage directory.
    files: Vec<(String, Vec<u8>)>,
    /// Inputs actually read, with content hashes.
    inputs: Vec<(String, String)>,
    params: Vec<(String, String)>,
    summary: Vec<(String, String)>,
}

impl<'a> Stage<'a> {
    fn new(config: &'a RunConfig, command: PipelineCommand) -> Self {
        Stage {
            config,
            command,
            files: Vec::new(),
            inputs: Vec::new(),
            params: stage_params(config, command),
            summary: Vec::new(),
        }
    }

    fn root(&self) -> &Path {
        &self.config.output_dir
    }

    fn param(&mut self, key: &str, value: impl fmt::Display) {
        self.params.push((key.to_string(), value.to_string()));
    }

    fn note(&mut self, key: &str, value: impl fmt::Display) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    fn file(&mut self, rel: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((rel.to_string(), bytes.into()));
    }

    /// Read a prerequisite artifact (path relative to the output root),
    /// recording its hash; a missing or unreadable file is a dependency
    /// error naming the command that produces it.
    fn read_artifact(&mut self, rel: &str, producer: PipelineCommand) -> Result<Vec<u8>> {
        let path = self.root().join(rel);
        let bytes = std::fs::read(&path).map_err(|_| {
            Error::Dependency(format!(
                "missing artifact {}; run `kinetok {producer}` first",
                path.display()
            ))
        })?;
        self.inputs.push((rel.to_string(), sha256_hex(&bytes)));
        Ok(bytes)
    }

    /// Read and fingerprint-check a prerequisite stage's manifest.
    fn require_stage(&mut self, producer: PipelineCommand) -> Result<Manifest> {
        let rel = format!("{}/manifest.txt", producer.name());
        let bytes = self.read_artifact(&rel, producer)?;
        let text = String::from_utf8_lossy(&bytes);
        let manifest = Manifest::parse(&text).map_err(|e| {
            Error::Dependency(format!(
                "unreadable manifest for stage {producer} ({e}); re-run `kinetok {producer}`"
            ))
        })?;
        check_fingerprint(self.config, &manifest, producer)?;
        Ok(manifest)
    }

    /// Record an input that lives outside the output directory.
    fn external_input(&mut self, label: String, bytes: &[u8]) {
        self.inputs.push((label, sha256_hex(bytes)));
    }

    /// Write all files atomically, then the manifest.
    fn commit(self) -> Result<StageReport> {
        let dir = self.root().join(self.command.name());
        let mut artifacts = Vec::new();
        let mut hashes = Vec::new();
        for (rel, bytes) in &self.files {
            let path = dir.join(rel);
            atomic_write(&path, bytes)?;
            hashes.push((rel.clone(), sha256_hex(bytes)));
            artifacts.push(path);
        }
        let manifest = Manifest {
            stage: self.command.name().to_string(),
            params: self.params,
            inputs: self.inputs,
            artifacts: hashes,
        };
        let manifest_path = dir.join("manifest.txt");
        atomic_write(&manifest_path, manifest.render().as_bytes())?;
        artifacts.push(manifest_path);
        Ok(StageReport {
            stage: self.command,
            artifacts,
            summary: self.summary,
        })
    }
}

// ---------------------------------------------------------------------------
// Shared parsing/rendering helpers

fn action_str(a: ActionLabel) -> &'static str {
    match a {
        ActionLabel::Buy => "buy",
        ActionLabel::Sell => "sell",
        ActionLabel::Hold => "hold",
    }
}

fn action_from_str(s: &str) -> Result<ActionLabel> {
    match s {
        "buy" => Ok(ActionLabel::Buy),
        "sell" => Ok(ActionLabel::Sell),
        "hold" => Ok(ActionLabel::Hold),
        other => Err(Error::Data(format!("unknown action '{other}'"))),
    }
}

fn regime_str(r: RegimeTag) -> &'static str {
    match r {
        RegimeTag::TrendUp => "trend-up",
        RegimeTag::MeanRevert => "mean-revert",
        RegimeTag::PreCrash => "pre-crash",
        RegimeTag::CrashDown => "crash-down",
        RegimeTag::Gbm => "gbm",
    }
}

fn render_kv(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

fn parse_kv(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn kv_get<'k>(pairs: &'k [(String, String)], key: &str, file: &str) -> Result<&'k str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Data(format!("{file}: missing key '{key}'")))
}

fn kv_f64(pairs: &[(String, String)], key: &str, file: &str) -> Result<f64> {
    kv_get(pairs, key, file)?
        .parse()
        .map_err(|_| Error::Data(format!("{file}: key '{key}' is not a number")))
}

fn render_stats(stats: &NormStats, extra: &[(String, String)]) -> String {
    let mut pairs = extra.to_vec();
    for (i, &ch) in crate::tokenizer::DERIVATIVE_CHANNELS.iter().enumerate() {
        pairs.push((format!("mu_{ch}"), format!("{}", stats.mu[i])));
        pairs.push((format!("sigma_{ch}"), format!("{}", stats.sigma[i])));
    }
    render_kv(&pairs)
}

fn parse_stats(bytes: &[u8], file: &str) -> Result<NormStats> {
    let text = String::from_utf8_lossy(bytes);
    let pairs = parse_kv(&text);
    let mut mu = [0.0f64; 7];
    let mut sigma = [0.0f64; 7];
    for (i, &ch) in crate::tokenizer::DERIVATIVE_CHANNELS.iter().enumerate() {
        mu[i] = kv_f64(&pairs, &format!("mu_{ch}"), file)?;
        sigma[i] = kv_f64(&pairs, &format!("sigma_{ch}"), file)?;
    }
    NormStats::new(mu, sigma)
}

fn render_windows_csv(data: &[LabeledWindow], t_len: usize) -> String {
    let mut out = String::from("start,label,r");
    for i in 0..t_len {
        for j in 0..TOKEN_DIM {
            out.push_str(&format!(",t{i}c{j}"));
        }
    }
    out.push('\n');
    for d in data {
        out.push_str(&format!(
            "{},{},{}",
            d.window.start_time,
            action_str(d.label),
            d.r
        ));
        for tok in &d.window.tokens {
            for v in tok.as_array() {
                out.push_str(&format!(",{v}"));
            }
        }
        out.push('\n');
    }
    out
}

fn parse_windows_csv(bytes: &[u8], t_len: usize, file: &str) -> Result<Vec<LabeledWindow>> {
    let text = String::from_utf8_lossy(bytes);
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{file}: empty windows file")))?;
    let expect_cols = 3 + t_len * TOKEN_DIM;
    if header.split(',').count() != expect_cols {
        return Err(Error::Data(format!(
            "{file}: window width {} does not match the configured context {t_len}",
            (header.split(',').count().saturating_sub(3)) / TOKEN_DIM
        )));
    }
    let mut out = Vec::new();
    for (lno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expect_cols {
            return Err(Error::Data(format!(
                "{file}: row {} has {} fields, expected {expect_cols}",
                lno + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Data(format!("{file}: row {}: bad {what}", lno + 2));
        let start_time: f64 = fields[0].parse().map_err(|_| bad("start"))?;
        let label = action_from_str(fields[1])?;
        let r: f64 = fields[2].parse().map_err(|_| bad("r"))?;
        let mut tokens = Vec::with_capacity(t_len);
        for i in 0..t_len {
            let mut arr = [0.0f64; TOKEN_DIM];
            for (j, a) in arr.iter_mut().enumerate() {
                *a = fields[3 + i * TOKEN_DIM + j]
                    .parse()
                    .map_err(|_| bad("token value"))?;
            }
            tokens.push(JointToken::from_array(arr));
        }
        out.push(LabeledWindow {
            window: TokenWindow { tokens, start_time },
            label,
            r,
        });
    }
    Ok(out)
}

fn render_sweep_csv(result: &SweepResult, value_name: &str) -> String {
    let mut out = format!("{value_name},action_rate,total_return,sharpe\n");
    for p in &result.points {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.value,
            p.action_rate,
            opt(p.total_return),
            opt(p.sharpe)
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Asset data access

struct AssetSeries {
    name: String,
    records: Vec<OhlcvRecord>,
    series: LogSeries,
}

/// First and last positions with dates inside [start, end].
fn date_range_indices(
    dates: &[NaiveDate],
    start: NaiveDate,
    end: NaiveDate,
) -> Option<(usize, usize)> {
    let lo = dates.iter().position(|d| *d >= start)?;
    let hi = dates.iter().rposition(|d| *d <= end)?;
    (lo <= hi).then_some((lo, hi))
}

/// Sub-series over knots [lo, hi] (inclusive), preserving knot values.
fn slice_series(series: &LogSeries, lo: usize, hi: usize) -> Result<(SnapshotSeries, AggregateSeries)> {
    let grid = TimeGrid::new(series.prices.grid().knots()[lo..=hi].to_vec())?;
    let prices = SnapshotSeries::new(grid.clone(), series.prices.values()[lo..=hi].to_vec())?;
    let volumes = AggregateSeries::new(grid, series.volumes.values()[lo..hi].to_vec())?;
    Ok((prices, volumes))
}

/// Load one asset's canonical candles back out of the enrich stage.
fn load_enriched_asset(stage: &mut Stage, index: usize) -> Result<AssetSeries> {
    let name = stage.config.assets[index].name.clone();
    let bytes = stage.read_artifact(
        &format!("enrich/{name}/ohlcv.csv"),
        PipelineCommand::Enrich,
    )?;
    let records = parse_ohlcv_csv(&bytes)?;
    let series = to_log_series(&records)?;
    Ok(AssetSeries {
        name,
        records,
        series,
    })
}

/// Test-period decision indices for an asset, with history checked.
fn test_indices(config: &RunConfig, asset: &AssetSeries) -> Result<(usize, usize)> {
    let dates: Vec<NaiveDate> = asset.records.iter().map(|r| r.date).collect();
    let (first, last) = date_range_indices(
        &dates,
        config.dates.test_start,
        config.dates.test_end,
    )
    .ok_or_else(|| {
        Error::InsufficientData(format!(
            "asset '{}' has no data in the test window {}..{}",
            asset.name, config.dates.test_start, config.dates.test_end
        ))
    })?;
    let t_len = config.model.context;
    if first < t_len {
        return Err(Error::InsufficientData(format!(
            "asset '{}': first test day {} has only {first} days of history, needs {t_len}",
            asset.name, dates[first]
        )));
    }
    Ok((first, last))
}

// ---------------------------------------------------------------------------
// enrich

fn run_enrich(config: &RunConfig) -> Result<StageReport> {
    let mut stage = Stage::new(config, PipelineCommand::Enrich);
    config.check_files()?;
    let noise = NoiseRatio::new(config.tokenizer.alpha)?;
    let mut max_date: Option<NaiveDate> = None;
    let mut total_rows = 0usize;

    for i in 0..config.assets.len() {
        let asset = config.assets[i].clone();
        let (records, regimes) = match (&asset.csv, &asset.synthetic) {
            (Some(path), _) => {
                let bytes = std::fs::read(path)?;
                stage.external_input(path.display().to_string(), &bytes);
                (parse_ohlcv_csv(&bytes)?, None)
            }
            (_, Some(spec)) => {
                let s = generate_synthetic(spec.kind, &spec.params, config.asset_seed(i))?;
                (s.records, Some(s.regimes))
            }
            _ => unreachable!("validated config"),
        };
        // Keep only the configured span; warm-up history is the train tail.
        let dates: Vec<NaiveDate> = records.iter().map(|r| r.date).collect();
        let (lo, hi) = date_range_indices(&dates, config.dates.train_start, config.dates.test_end)
            .ok_or_else(|| {
                Error::InsufficientData(format!(
                    "asset '{}' has no rows between {} and {}",
                    asset.name, config.dates.train_start, config.dates.test_end
                ))
            })?;
        let records = records[lo..=hi].to_vec();
        let regimes = regimes.map(|r| r[lo..=hi].to_vec());
        let series = to_log_series(&records)?;

        let (price_fit, price_diag) = fit_snapshot_spline(&series.prices, noise)?;
        let (volume_fit, volume_diag) = fit_aggregate_spline(&series.volumes, noise)?;

        let name = &asset.name;
        stage.file(&format!("{name}/ohlcv.csv"), ohlcv_to_csv(&records));

        let flagged: Vec<String> = series
            .floored_volume_days
            .iter()
            .map(|&k| records[k].date.to_string())
            .collect();
        let quality = render_kv(&[
            ("rows".into(), records.len().to_string()),
            ("date_start".into(), records[0].date.to_string()),
            ("date_end".into(), records[records.len() - 1].date.to_string()),
            (
                "zero_volume_days".into(),
                series.floored_volume_days.len().to_string(),
            ),
            ("zero_volume_dates".into(), flagged.join(";")),
        ]);
        stage.file(&format!("{name}/quality.txt"), quality);

        let mut price_csv = String::from("t,c0,c1,c2,c3\n");
        for (k, c) in price_fit.coeffs().iter().enumerate() {
            let t = price_fit.grid().knots()[k];
            price_csv.push_str(&format!("{t},{},{},{},{}\n", c[0], c[1], c[2], c[3]));
        }
        stage.file(&format!("{name}/price_spline.csv"), price_csv);
        let mut volume_csv = String::from("t,c0,c1,c2,c3,c4\n");
        for (k, c) in volume_fit.coeffs().iter().enumerate() {
            let t = volume_fit.grid().knots()[k];
            volume_csv.push_str(&format!(
                "{t},{},{},{},{},{}\n",
                c[0], c[1], c[2], c[3], c[4]
            ));
        }
        stage.file(&format!("{name}/volume_spline.csv"), volume_csv);

        stage.file(
            &format!("{name}/fit.txt"),
            render_kv(&[
                ("alpha".into(), format!("{}", config.tokenizer.alpha)),
                (
                    "price_kkt_residual".into(),
                    format!("{}", price_diag.kkt_residual),
                ),
                (
                    "volume_kkt_residual".into(),
                    format!("{}", volume_diag.kkt_residual),
                ),
                (
                    "price_objective".into(),
                    format!("{}", price_diag.objective_value),
                ),
                (
                    "volume_objective".into(),
                    format!("{}", volume_diag.objective_value),
                ),
            ]),
        );

        if let Some(regimes) = regimes {
            let mut csv = String::from("date,regime\n");
            for (r, tag) in records.iter().zip(&regimes) {
                csv.push_str(&format!("{},{}\n", r.date, regime_str(*tag)));
            }
            stage.file(&format!("{name}/regimes.csv"), csv);
        }

        stage.param(&format!("rows_{name}"), records.len());
        max_date = max_date.max(Some(records[records.len() - 1].date));
        total_rows += records.len();
        stage.note(name, format!("{} rows", records.len()));
    }

    // Resolved config snapshot, for reproducing the run. The output
    // directory is where the run lives, not what it computes, so it is
    // normalized out — identical experiments produce identical snapshots
    // regardless of destination.
    let mut persisted = config.clone();
    persisted.output_dir = RunConfig::default().output_dir;
    stage.file("config.toml", persisted.to_toml()?);
    if let Some(d) = max_date {
        stage.param("data_end", d);
    }
    stage.note("assets", config.assets.len());
    stage.note("rows", total_rows);
    stage.commit()
}

// ---------------------------------------------------------------------------
// tokenize

fn run_tokenize(config: &RunConfig) -> Result<StageReport> {
    let mut stage = Stage::new(config, PipelineCommand::Tokenize);
    stage.require_stage(PipelineCommand::Enrich)?;
    let noise = NoiseRatio::new(config.tokenizer.alpha)?;
    let tau = Threshold::new(config.labels.tau)?;
    let t_len = config.model.context;

    // Pass 1: anchored, unnormalized training windows per asset.
    let mut per_asset: Vec<(String, Vec<LabeledWindow>)> = Vec::new();
    let mut fit_start: Option<NaiveDate> = None;
    let mut fit_end: Option<NaiveDate> = None;
    for i in 0..config.assets.len() {
        let asset = load_enriched_asset(&mut stage, i)?;
        let dates: Vec<NaiveDate> = asset.records.iter().map(|r| r.date).collect();
        let (lo, hi) =
            date_range_indices(&dates, config.dates.train_start, config.dates.train_end)
                .ok_or_else(|| {
                    Error::InsufficientData(format!(
                        "asset '{}' has no training data before {}",
                        asset.name, config.dates.train_end
                    ))
                })?;
        if hi - lo + 1 < t_len + 2 {
            return Err(Error::InsufficientData(format!(
                "asset '{}': {} training days cannot fill a {t_len}-token window plus look-ahead",
                asset.name,
                hi - lo + 1
            )));
        }
        let train_slice = to_log_series(&asset.records[lo..=hi])?;
        let raw = label_dataset(
            &train_slice.prices,
            &train_slice.volumes,
            tau,
            t_len,
            config.tokenizer.kind,
            noise,
            &NormStats::identity(),
        )?;
        fit_start = Some(fit_start.map_or(dates[lo], |d: NaiveDate| d.min(dates[lo])));
        fit_end = Some(fit_end.map_or(dates[hi], |d: NaiveDate| d.max(dates[hi])));
        per_asset.push((asset.name, raw));
    }

    // Frozen stats over the pooled training windows, then pass 2: normalize.
    let stats = compute_global_stats(per_asset.iter().flat_map(|(_, ws)| ws.iter().map(|w| &w.window)))?;
    let mut label_counts = [0usize; 3];
    let mut total_windows = 0usize;
    for (name, raw) in &per_asset {
        let normalized: Vec<LabeledWindow> = raw
            .iter()
            .map(|d| LabeledWindow {
                window: zscore_normalize(&d.window, &stats),
                label: d.label,
                r: d.r,
            })
            .collect();
        for d in &normalized {
            label_counts[d.label.index()] += 1;
        }
        total_windows += normalized.len();
        stage.file(
            &format!("{name}/windows.csv"),
            render_windows_csv(&normalized, t_len),
        );
        // Decision-time token trace: each window's newest token.
        let trace: Vec<(f64, JointToken)> = normalized
            .iter()
            .map(|d| {
                let last = d.window.tokens[d.window.tokens.len() - 1];
                (d.window.start_time + (t_len - 1) as f64, last)
            })
            .collect();
        stage.file(&format!("{name}/tokens.csv"), tokens_to_csv(&trace));
        stage.param(&format!("windows_{name}"), raw.len());
    }

    let fit_start = fit_start.unwrap();
    let fit_end = fit_end.unwrap();
    stage.file(
        "stats.txt",
        render_stats(
            &stats,
            &[
                ("windows".into(), total_windows.to_string()),
                (
                    "tokens".into(),
                    (total_windows * t_len).to_string(),
                ),
                ("data_start".into(), fit_start.to_string()),
                ("data_end".into(), fit_end.to_string()),
            ],
        ),
    );
    // The leakage-relevant provenance: the last date any statistic saw.
    stage.param("data_start", fit_start);
    stage.param("data_end", fit_end);
    stage.note("windows", total_windows);
    stage.note(
        "labels buy/sell/hold",
        format!(
            "{}/{}/{}",
            label_counts[0], label_counts[1], label_counts[2]
        ),
    );
    stage.commit()
}

// ---------------------------------------------------------------------------
// train

fn run_train(config: &RunConfig) -> Result<StageReport> {
    let mut stage = Stage::new(config, PipelineCommand::Train);
    let tokenize_manifest = stage.require_stage(PipelineCommand::Tokenize)?;
    let data_end = tokenize_manifest
        .param("data_end")
        .map(str::to_string)
        .ok_or_else(|| {
            Error::Dependency(
                "tokenize manifest lacks data_end; re-run `kinetok tokenize` first".into(),
            )
        })?;
    let t_len = config.model.context;

    let mut data: Vec<LabeledWindow> = Vec::new();
    for asset in &config.assets {
        let rel = format!("tokenize/{}/windows.csv", asset.name);
        let bytes = stage.read_artifact(&rel, PipelineCommand::Tokenize)?;
        data.extend(parse_windows_csv(&bytes, t_len, &rel)?);
    }

    let mut mc = config.model;
    mc.seed = config.seed;
    let mut params = ModelParameters::init(mc)?;
    let weights = LossWeights::new(config.labels.loss_weights)?;
    let log = train(&mut params, &data, &weights)?;

    // In-sample accuracy, deterministic (inference mode).
    let mut correct = 0usize;
    for d in &data {
        let (action, _) = predict_action(&params, &d.window)?;
        if action == d.label {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / data.len() as f64;

    stage.file("checkpoint.bin", checkpoint_to_bytes(&params));
    let mut log_csv = String::from("epoch,lr,loss\n");
    for (e, (loss, lr)) in log.epoch_losses.iter().zip(&log.epoch_lrs).enumerate() {
        log_csv.push_str(&format!("{e},{lr},{loss}\n"));
    }
    stage.file("training_log.csv", log_csv);
    let final_loss = *log.epoch_losses.last().unwrap_or(&f64::NAN);
    stage.file(
        "report.txt",
        render_kv(&[
            ("windows".into(), data.len().to_string()),
            ("parameters".into(), mc.parameter_count().to_string()),
            ("epochs".into(), mc.epochs.to_string()),
            ("final_loss".into(), format!("{final_loss}")),
            ("train_accuracy".into(), format!("{accuracy}")),
        ]),
    );
    stage.param("data_end", &data_end);
    stage.note("windows", data.len());
    stage.note("final loss", format!("{final_loss:.4}"));
    stage.note("train accuracy", format!("{:.1}%", accuracy * 100.0));
    stage.commit()
}

// ---------------------------------------------------------------------------
// backtest

/// Leakage guard: the recorded fit range must end strictly before the test
/// window starts. Runs before fingerprint checks so a dangerous config is
/// named as leakage, not as parameter drift.
fn check_leakage(stage: &mut Stage) -> Result<()> {
    let test_start = stage.config.dates.test_start;
    for producer in [PipelineCommand::Tokenize, PipelineCommand::Train] {
        let rel = format!("{}/manifest.txt", producer.name());
        let bytes = stage.read_artifact(&rel, producer)?;
        let manifest = Manifest::parse(&String::from_utf8_lossy(&bytes)).map_err(|e| {
            Error::Dependency(format!(
                "unreadable manifest for stage {producer} ({e}); re-run `kinetok {producer}`"
            ))
        })?;
        let data_end = manifest.param("data_end").ok_or_else(|| {
            Error::Dependency(format!(
                "{producer} manifest lacks data_end; re-run `kinetok {producer}` first"
            ))
        })?;
        let data_end: NaiveDate = data_end.parse().map_err(|_| {
            Error::Dependency(format!(
                "{producer} manifest has unreadable data_end '{data_end}'; re-run `kinetok {producer}`"
            ))
        })?;
        if data_end >= test_start {
            return Err(Error::Leakage(format!(
                "{producer} artifacts were fitted on data through {data_end}, which is not \
                 strictly before test_start {test_start}; refusing to backtest"
            )));
        }
        check_fingerprint(stage.config, &manifest, producer)?;
    }
    Ok(())
}

/// Per-day decision record for one asset's test window.
struct TestRun {
    first: usize,
    last: usize,
    actions: Vec<ActionLabel>,
    probs: Vec<[f64; 3]>,
    /// Realized next-day enriched returns and labels, for days that have a
    /// look-ahead observation (all but possibly the final day).
    labeled: Vec<(f64, ActionLabel)>,
}

fn run_test_policy(
    config: &RunConfig,
    asset: &AssetSeries,
    params: &ModelParameters,
    stats: &NormStats,
) -> Result<TestRun> {
    let noise = NoiseRatio::new(config.tokenizer.alpha)?;
    let tau = Threshold::new(config.labels.tau)?;
    let t_len = config.model.context;
    let (first, last) = test_indices(config, asset)?;
    let n = asset.series.prices.grid().len();

    // Label-time windows over the test span (the slice end extends one day
    // past the window when the series allows, so the final day gets a label).
    let hi = (last + 1).min(n - 1);
    let (p_slice, v_slice) = slice_series(&asset.series, first - t_len, hi)?;
    let labeled_windows = label_dataset(
        &p_slice,
        &v_slice,
        tau,
        t_len,
        config.tokenizer.kind,
        noise,
        stats,
    )?;

    let mut actions = Vec::with_capacity(last - first + 1);
    let mut probs = Vec::with_capacity(last - first + 1);
    let mut labeled = Vec::new();
    for t in first..=last {
        let idx = t - first;
        let window = if idx < labeled_windows.len() {
            labeled_windows[idx].window.clone()
        } else {
            // Final day without look-ahead: same construction, direct call.
            rolling_tokenize(
                &asset.series.prices,
                &asset.series.volumes,
                t,
                t_len,
                config.tokenizer.kind,
                noise,
                stats,
            )?
        };
        let (action, p) = predict_action(params, &window)?;
        actions.push(action);
        probs.push(p.probs());
        if idx < labeled_windows.len() {
            labeled.push((labeled_windows[idx].r, labeled_windows[idx].label));
        }
    }
    Ok(TestRun {
        first,
        last,
        actions,
        probs,
        labeled,
    })
}

fn render_metrics(result: &BacktestResult) -> String {
    let m = &result.metrics;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_else(|| "absent".into());
    let mut pairs = vec![
        ("initial_capital".into(), format!("{}", result.initial_capital)),
        (
            "final_equity".into(),
            format!("{}", result.equity_curve[result.equity_curve.len() - 1]),
        ),
        ("total_return".into(), format!("{}", m.total_return)),
        ("annualized_return".into(), format!("{}", m.annualized_return)),
        ("annualized_vol".into(), format!("{}", m.annualized_vol)),
        (
            "downside_deviation".into(),
            format!("{}", m.downside_deviation),
        ),
        ("sharpe".into(), opt(m.sharpe)),
        ("sortino".into(), opt(m.sortino)),
        ("max_drawdown".into(), format!("{}", m.max_drawdown)),
        (
            "annualized_turnover".into(),
            format!("{}", m.annualized_turnover),
        ),
        ("action_rate".into(), format!("{}", m.action_rate)),
        ("risk_free".into(), format!("{}", m.risk_free)),
        ("days".into(), format!("{}", m.days)),
        ("trades".into(), format!("{}", result.trades.len())),
        (
            "actions_buy".into(),
            format!("{}", result.action_counts[0]),
        ),
        (
            "actions_sell".into(),
            format!("{}", result.action_counts[1]),
        ),
        (
            "actions_hold".into(),
            format!("{}", result.action_counts[2]),
        ),
        ("taxes_paid".into(), format!("{}", result.taxes_paid)),
        (
            "tax_liability_outstanding".into(),
            format!("{}", result.tax_liability_outstanding),
        ),
        (
            "final_regime".into(),
            match result.final_state.regime {
                Regime::Cash => "cash".into(),
                Regime::Long => "long".into(),
            },
        ),
        ("final_cash".into(), format!("{}", result.final_state.cash)),
        (
            "final_shares".into(),
            format!("{}", result.final_state.shares),
        ),
    ];
    for (y, pnl) in result.realized_pnl_by_year.iter().enumerate() {
        pairs.push((format!("realized_pnl_year_{}", y + 1), format!("{pnl}")));
    }
    render_kv(&pairs)
}

fn run_backtest_stage(config: &RunConfig) -> Result<StageReport> {
    let mut stage = Stage::new(config, PipelineCommand::Backtest);
    check_leakage(&mut stage)?;

    let stats_bytes = stage.read_artifact("tokenize/stats.txt", PipelineCommand::Tokenize)?;
    let stats = parse_stats(&stats_bytes, "tokenize/stats.txt")?;
    let ckpt_bytes = stage.read_artifact("train/checkpoint.bin", PipelineCommand::Train)?;
    let params = checkpoint_from_bytes(&ckpt_bytes).map_err(|e| {
        Error::Dependency(format!(
            "unreadable checkpoint train/checkpoint.bin ({e}); re-run `kinetok train`"
        ))
    })?;
    let mut expected = config.model;
    expected.seed = config.seed;
    if params.config != expected {
        return Err(Error::Dependency(format!(
            "checkpoint was trained with {:?} but this config wants {expected:?}; \
             re-run `kinetok train` first",
            params.config
        )));
    }

    let cost = CostModel::new(config.backtest.cost_bps)?;
    let tax = TaxSchedule::new(config.backtest.tax_rate, config.backtest.tax_period_days)?;

    for i in 0..config.assets.len() {
        let asset = load_enriched_asset(&mut stage, i)?;
        let run = run_test_policy(config, &asset, &params, &stats)?;
        let closes: Vec<f64> = asset.records[run.first..=run.last]
            .iter()
            .map(|r| r.close)
            .collect();
        let result = run_backtest(
            &run.actions,
            &closes,
            cost,
            tax,
            config.backtest.initial_capital,
        )?;

        let name = &asset.name;
        let mut blotter = String::from("date,side,price,shares,notional,cost\n");
        for t in &result.trades {
            blotter.push_str(&format!(
                "{},{},{},{},{},{}\n",
                asset.records[run.first + t.time].date,
                match t.side {
                    TradeSide::Buy => "buy",
                    TradeSide::Sell => "sell",
                },
                t.price,
                t.shares,
                t.notional,
                t.cost
            ));
        }
        stage.file(&format!("{name}/blotter.csv"), blotter);

        let mut equity = String::from("date,close,action,equity\n");
        for (k, t) in (run.first..=run.last).enumerate() {
            equity.push_str(&format!(
                "{},{},{},{}\n",
                asset.records[t].date,
                closes[k],
                action_str(run.actions[k]),
                result.equity_curve[k + 1]
            ));
        }
        stage.file(&format!("{name}/equity.csv"), equity);

        let mut preds = String::from("date,p_buy,p_sell,p_hold,action,r_next,label\n");
        for (k, (r, label)) in run.labeled.iter().enumerate() {
            let p = run.probs[k];
            preds.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                asset.records[run.first + k].date,
                p[0],
                p[1],
                p[2],
                action_str(run.actions[k]),
                r,
                action_str(*label)
            ));
        }
        stage.file(&format!("{name}/predictions.csv"), preds);
        stage.file(&format!("{name}/metrics.txt"), render_metrics(&result));

        stage.param(&format!("test_days_{name}"), run.actions.len());
        stage.note(
            name,
            format!(
                "final equity {:.2}, {} trades",
                result.equity_curve[result.equity_curve.len() - 1],
                result.trades.len()
            ),
        );
    }
    stage.commit()
}

// ---------------------------------------------------------------------------
// sweep

/// Actions and dates recorded per-day by the backtest stage.
fn load_equity_csv(bytes: &[u8], file: &str) -> Result<Vec<(NaiveDate, f64, ActionLabel)>> {
    let text = String::from_utf8_lossy(bytes);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Data(format!("{file}: row {} malformed", i + 1)));
        }
        let bad = |what: &str| Error::Data(format!("{file}: row {}: bad {what}", i + 1));
        out.push((
            f[0].parse().map_err(|_| bad("date"))?,
            f[1].parse().map_err(|_| bad("close"))?,
            action_from_str(f[2])?,
        ));
    }
    Ok(out)
}

fn run_sweep(config: &RunConfig) -> Result<StageReport> {
    let mut stage = Stage::new(config, PipelineCommand::Sweep);
    stage.require_stage(PipelineCommand::Backtest)?;
    let stats_bytes = stage.read_artifact("tokenize/stats.txt", PipelineCommand::Tokenize)?;
    let stats = parse_stats(&stats_bytes, "tokenize/stats.txt")?;
    let noise = NoiseRatio::new(config.tokenizer.alpha)?;
    let tax = TaxSchedule::new(config.backtest.tax_rate, config.backtest.tax_period_days)?;
    let t_len = config.model.context;

    for i in 0..config.assets.len() {
        let asset = load_enriched_asset(&mut stage, i)?;
        let name = asset.name.clone();
        let rel = format!("backtest/{name}/equity.csv");
        let equity_bytes = stage.read_artifact(&rel, PipelineCommand::Backtest)?;
        let rows = load_equity_csv(&equity_bytes, &rel)?;
        let actions: Vec<ActionLabel> = rows.iter().map(|r| r.2).collect();
        let closes: Vec<f64> = rows.iter().map(|r| r.1).collect();

        // Dead-band sensitivity over the same label-time windows as the
        // backtest (labels re-derived per tau on fixed data).
        let (first, last) = test_indices(config, &asset)?;
        let n = asset.series.prices.grid().len();
        let hi = (last + 1).min(n - 1);
        let (p_slice, v_slice) = slice_series(&asset.series, first - t_len, hi)?;
        let taus = tau_sweep(
            &p_slice,
            &v_slice,
            &TAU_SWEEP_AXIS,
            t_len,
            config.tokenizer.kind,
            noise,
            &stats,
        )?;
        stage.file(&format!("{name}/tau_sweep.csv"), render_sweep_csv(&taus, "tau"));

        let bps = bps_sweep(
            &actions,
            &closes,
            &BPS_SWEEP_AXIS,
            tax,
            config.backtest.initial_capital,
        )?;
        stage.file(&format!("{name}/bps_sweep.csv"), render_sweep_csv(&bps, "bps"));

        let rates: Vec<String> = taus
            .points
            .iter()
            .map(|p| format!("{:.3}", p.action_rate))
            .collect();
        stage.note(&name, format!("action rate by tau: {}", rates.join(" ")));
    }
    stage.commit()
}

// ---------------------------------------------------------------------------
// diagnose

fn load_predictions_csv(
    bytes: &[u8],
    file: &str,
) -> Result<Vec<(ActionLabel, f64, f64, ActionLabel)>> {
    // (predicted action, p_buy, r_next, true label)
    let text = String::from_utf8_lossy(bytes);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Data(format!("{file}: row {} malformed", i + 1)));
        }
        let bad = |what: &str| Error::Data(format!("{file}: row {}: bad {what}", i + 1));
        out.push((
            action_from_str(f[4])?,
            f[1].parse().map_err(|_| bad("p_buy"))?,
            f[5].parse().map_err(|_| bad("r_next"))?,
            action_from_str(f[6])?,
        ));
    }
    Ok(out)
}

fn load_blotter_csv(bytes: &[u8], file: &str) -> Result<Vec<(TradeSide, f64)>> {
    let text = String::from_utf8_lossy(bytes);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Data(format!("{file}: row {} malformed", i + 1)));
        }
        let side = match f[1] {
            "buy" => TradeSide::Buy,
            "sell" => TradeSide::Sell,
            other => return Err(Error::Data(format!("{file}: bad side '{other}'"))),
        };
        let price: f64 = f[2]
            .parse()
            .map_err(|_| Error::Data(format!("{file}: row {}: bad price", i + 1)))?;
        out.push((side, price));
    }
    Ok(out)
}

fn run_diagnose(config: &RunConfig) -> Result<StageReport> {
    let mut stage = Stage::new(config, PipelineCommand::Diagnose);
    stage.require_stage(PipelineCommand::Backtest)?;
    let cost = CostModel::new(config.backtest.cost_bps)?;
    let tax = TaxSchedule::new(config.backtest.tax_rate, config.backtest.tax_period_days)?;

    let mut any_flagged = false;
    for asset in &config.assets {
        let name = asset.name.clone();
        let eq_rel = format!("backtest/{name}/equity.csv");
        let rows = load_equity_csv(
            &stage.read_artifact(&eq_rel, PipelineCommand::Backtest)?,
            &eq_rel,
        )?;
        let pred_rel = format!("backtest/{name}/predictions.csv");
        let preds = load_predictions_csv(
            &stage.read_artifact(&pred_rel, PipelineCommand::Backtest)?,
            &pred_rel,
        )?;
        let blot_rel = format!("backtest/{name}/blotter.csv");
        let fills = load_blotter_csv(
            &stage.read_artifact(&blot_rel, PipelineCommand::Backtest)?,
            &blot_rel,
        )?;

        let actions: Vec<ActionLabel> = rows.iter().map(|r| r.2).collect();
        let closes: Vec<f64> = rows.iter().map(|r| r.1).collect();
        // The backtest is a pure function of its inputs, so replaying the
        // recorded actions reproduces the original run exactly.
        let result = run_backtest(&actions, &closes, cost, tax, config.backtest.initial_capital)?;
        let dist = action_distribution(&actions)?;
        let equilibrium = detect_liquidation_equilibrium(&actions, &result)?;
        any_flagged |= equilibrium.flagged();

        let predicted: Vec<ActionLabel> = preds.iter().map(|p| p.0).collect();
        let true_labels: Vec<ActionLabel> = preds.iter().map(|p| p.3).collect();
        let confusion = confusion_matrix(&predicted, &true_labels)?;
        let mut confusion_csv =
            String::from("true\\predicted,buy,sell,hold\n");
        for (ti, row) in confusion.iter().enumerate() {
            confusion_csv.push_str(&format!(
                "{},{},{},{}\n",
                action_str(ActionLabel::from_index(ti).unwrap()),
                row[0],
                row[1],
                row[2]
            ));
        }
        stage.file(&format!("{name}/confusion.csv"), confusion_csv);

        // Calibration of the Buy head against realized next-day direction.
        let buy_probs: Vec<f64> = preds.iter().map(|p| p.1).collect();
        let outcomes: Vec<bool> = preds.iter().map(|p| p.2 > 0.0).collect();
        let curve = calibration_curve(&buy_probs, &outcomes, CALIBRATION_BINS)?;
        let mut calib_csv = String::from("mean_predicted,win_rate,count\n");
        for b in &curve.bins {
            calib_csv.push_str(&format!(
                "{},{},{}\n",
                b.mean_predicted, b.win_rate, b.count
            ));
        }
        stage.file(&format!("{name}/calibration.csv"), calib_csv);

        // Break-even cost from completed round trips.
        let mut trips = 0usize;
        let mut total_log_gain = 0.0;
        let mut entry: Option<f64> = None;
        for (side, price) in &fills {
            match side {
                TradeSide::Buy => entry = Some(*price),
                TradeSide::Sell => {
                    if let Some(e) = entry.take() {
                        trips += 1;
                        total_log_gain += (price / e).ln();
                    }
                }
            }
        }
        let break_even = if trips > 0 {
            format!("{}", break_even_bps(total_log_gain, trips)?)
        } else {
            "absent".into()
        };

        let mut pairs = vec![
            ("actions_buy".into(), dist.counts[0].to_string()),
            ("actions_sell".into(), dist.counts[1].to_string()),
            ("actions_hold".into(), dist.counts[2].to_string()),
            ("action_rate".into(), format!("{}", dist.action_rate)),
            (
                "portfolio_absorbed".into(),
                equilibrium.portfolio_absorbed.to_string(),
            ),
            (
                "action_collapse".into(),
                equilibrium.action_collapse.to_string(),
            ),
            (
                "dominant_class".into(),
                action_str(equilibrium.dominant_class).to_string(),
            ),
            (
                "dominant_share".into(),
                format!("{}", equilibrium.dominant_share),
            ),
            (
                "entries_executed".into(),
                equilibrium.entries_executed.to_string(),
            ),
            ("equilibrium_flagged".into(), equilibrium.flagged().to_string()),
            ("explanation".into(), equilibrium.explanation.clone()),
            ("round_trips".into(), trips.to_string()),
            ("break_even_bps".into(), break_even),
            ("calibration_max_gap".into(), format!("{}", curve.max_gap())),
        ];
        pairs.push(("labeled_days".into(), preds.len().to_string()));
        stage.file(&format!("{name}/report.txt"), render_kv(&pairs));

        stage.note(
            &name,
            if equilibrium.flagged() {
                "FLAGGED (degenerate policy)".to_string()
            } else {
                format!("healthy, action rate {:.2}", dist.action_rate)
            },
        );
    }
    stage.note("any_flagged", any_flagged);
    stage.commit()
}
