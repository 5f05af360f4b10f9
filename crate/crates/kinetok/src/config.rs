//! Run configuration: a single TOML document describing assets, date
//! windows, tokenizer, labels, model, and backtest settings.
//!
//! The temporal cutoff is a hard invariant: the training window must end
//! strictly before the test window starts, and a config that violates it is
//! refused with a leakage error before any stage runs. Test windows state
//! an explicit end date; there is no open-ended "present".
//!
//! CLI flags (`--seed`, `--out`) override file values. Parsing is
//! panic-free on arbitrary input.

use crate::backtest::{CostModel, TaxSchedule};
use crate::data::{SyntheticKind, SyntheticParams};
use crate::error::{Error, Result};
use crate::labeling::{LossWeights, Threshold};
use crate::model::ModelConfig;
use crate::series::NoiseRatio;
use crate::tokenizer::TokenizerKind;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Where an asset's candles come from: a CSV file or a seeded generator.
/// Exactly one of `csv` / `synthetic` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetConfig {
    /// Name used for artifact subdirectories; `[a-z0-9_-]+`.
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

/// Generator choice for a synthetic asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    #[serde(default)]
    pub params: SyntheticParams,
    /// Per-asset generator seed; defaults to the run seed mixed with the
    /// asset's position in the list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Train/test windows. The cutoff invariant `train_end < test_start` is
/// what the leakage guard enforces downstream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DateRanges {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

impl Default for DateRanges {
    fn default() -> Self {
        let d = |y, m, dd| NaiveDate::from_ymd_opt(y, m, dd).unwrap();
        DateRanges {
            train_start: d(2015, 1, 1),
            train_end: d(2022, 12, 31),
            test_start: d(2023, 1, 1),
            test_end: d(2024, 12, 31),
        }
    }
}

impl DateRanges {
    pub fn validate(&self) -> Result<()> {
        if self.train_start >= self.train_end {
            return Err(Error::Config(format!(
                "train_start {} must precede train_end {}",
                self.train_start, self.train_end
            )));
        }
        if self.train_end >= self.test_start {
            return Err(Error::Leakage(format!(
                "temporal cutoff violated: train_end {} must lie strictly before test_start {}",
                self.train_end, self.test_start
            )));
        }
        if self.test_start > self.test_end {
            return Err(Error::Config(format!(
                "test_start {} must not exceed test_end {}",
                self.test_start, self.test_end
            )));
        }
        Ok(())
    }
}

/// Tokenizer front-end settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSettings {
    pub kind: TokenizerKind,
    /// Noise ratio α = σ_process / σ_measurement for the spline fits.
    pub alpha: f64,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        TokenizerSettings {
            kind: TokenizerKind::Spline,
            alpha: NoiseRatio::DEFAULT_ALPHA,
        }
    }
}

/// Labeling rule settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSettings {
    /// Momentum threshold on the predicted-return magnitude.
    pub tau: f64,
    /// Cross-entropy class weights [buy, sell, hold].
    pub loss_weights: [f64; 3],
}

impl Default for LabelSettings {
    fn default() -> Self {
        LabelSettings {
            tau: Threshold::DEFAULT_TAU,
            loss_weights: LossWeights::default().w,
        }
    }
}

/// Execution-cost and tax settings for the backtest stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSettings {
    pub cost_bps: f64,
    pub tax_rate: f64,
    pub tax_period_days: usize,
    pub initial_capital: f64,
}

impl Default for BacktestSettings {
    fn default() -> Self {
        BacktestSettings {
            cost_bps: 5.0,
            tax_rate: 0.32,
            tax_period_days: 252,
            initial_capital: 10_000.0,
        }
    }
}

/// The full run configuration (TOML schema documented in the README).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub assets: Vec<AssetConfig>,
    pub dates: DateRanges,
    pub tokenizer: TokenizerSettings,
    pub labels: LabelSettings,
    pub model: ModelConfig,
    pub backtest: BacktestSettings,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            assets: Vec::new(),
            dates: DateRanges::default(),
            tokenizer: TokenizerSettings::default(),
            labels: LabelSettings::default(),
            model: ModelConfig::desk(),
            backtest: BacktestSettings::default(),
            seed: 7,
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn valid_asset_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' || c == '_')
}

impl RunConfig {
    /// Structural validation: every referenced setting must be
    /// constructible, asset names unique and path-safe, dates ordered.
    pub fn validate(&self) -> Result<()> {
        if self.assets.is_empty() {
            return Err(Error::Config("config lists no assets".into()));
        }
        for (i, a) in self.assets.iter().enumerate() {
            if !valid_asset_name(&a.name) {
                return Err(Error::Config(format!(
                    "asset {i}: name '{}' must match [a-z0-9_-]+",
                    a.name
                )));
            }
            match (&a.csv, &a.synthetic) {
                (Some(_), None) => {}
                (None, Some(spec)) => spec.params.validate()?,
                (Some(_), Some(_)) => {
                    return Err(Error::Config(format!(
                        "asset '{}': set either csv or synthetic, not both",
                        a.name
                    )))
                }
                (None, None) => {
                    return Err(Error::Config(format!(
                        "asset '{}': needs a csv path or a synthetic spec",
                        a.name
                    )))
                }
            }
            if self.assets[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Config(format!("duplicate asset name '{}'", a.name)));
            }
        }
        self.dates.validate()?;
        NoiseRatio::new(self.tokenizer.alpha)?;
        Threshold::new(self.labels.tau)?;
        LossWeights::new(self.labels.loss_weights)?;
        self.model.validate()?;
        CostModel::new(self.backtest.cost_bps)?;
        TaxSchedule::new(self.backtest.tax_rate, self.backtest.tax_period_days)?;
        if !(self.backtest.initial_capital.is_finite() && self.backtest.initial_capital > 0.0) {
            return Err(Error::Config(format!(
                "initial_capital must be positive, got {}",
                self.backtest.initial_capital
            )));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }

    /// Check that every referenced CSV file exists.
    pub fn check_files(&self) -> Result<()> {
        for a in &self.assets {
            if let Some(path) = &a.csv {
                if !path.is_file() {
                    return Err(Error::Config(format!(
                        "asset '{}': csv file {} does not exist",
                        a.name,
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Apply CLI overrides (flags beat file values).
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.output_dir = o;
        }
    }

    /// Generator seed for the asset at `index` (explicit per-asset seed, or
    /// the run seed mixed with the position).
    pub fn asset_seed(&self, index: usize) -> u64 {
        match self.assets[index].synthetic.as_ref().and_then(|s| s.seed) {
            Some(s) => s,
            None => self.seed ^ ((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        }
    }

    /// Canonical TOML rendering (used for manifests and determinism checks).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))
    }
}

/// Parse a TOML run configuration and validate its structure. Panic-free
/// on arbitrary input; file-existence checks are separate (`check_files`).
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a config file; relative CSV paths resolve against the config's
/// directory, and referenced files must exist.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = parse_run_config(&text)?;
    if let Some(dir) = path.parent() {
        for a in &mut cfg.assets {
            if let Some(csv) = &a.csv {
                if csv.is_relative() {
                    a.csv = Some(dir.join(csv));
                }
            }
        }
    }
    cfg.check_files()?;
    Ok(cfg)
}

/// A ready-to-run example configuration over the four synthetic scenarios.
pub fn example_config() -> RunConfig {
    let synth = |name: &str, kind: SyntheticKind| AssetConfig {
        name: name.into(),
        csv: None,
        synthetic: Some(SyntheticSpec {
            kind,
            params: SyntheticParams {
                days: 900,
                start_date: NaiveDate::from_ymd_opt(2021, 1, 4).unwrap(),
                ..SyntheticParams::default()
            },
            seed: None,
        }),
    };
    RunConfig {
        assets: vec![
            synth("trend", SyntheticKind::Trend),
            synth("revert", SyntheticKind::MeanRevert),
            synth("crash", SyntheticKind::Crash),
            synth("gbm", SyntheticKind::Gbm),
        ],
        ..RunConfig::default()
    }
}
