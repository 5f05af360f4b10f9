//! Market data ingestion and synthetic series generation.
//!
//! Real data enters as OHLCV CSV (header-named columns in any order); rows
//! are validated against the candle invariant low ≤ min(open, close) ≤
//! max(open, close) ≤ high, date-sorted, and de-duplicated. Synthetic series
//! come from four seeded generators (trend, mean-revert, crash, GBM) that
//! attach ground-truth regime tags for test assertions.
//!
//! The log transform maps closes to log-price snapshots and daily volume to
//! per-interval log-volume aggregates; zero-volume days are floored at one
//! share before the log and flagged.
//!
//! All parsers here are panic-free on arbitrary bytes.

use crate::error::{Error, Result};
use crate::series::{AggregateSeries, SnapshotSeries, TimeGrid};
use crate::tokenizer::JointToken;
use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One daily candle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OhlcvRecord {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl OhlcvRecord {
    /// Candle invariant: positive prices with low ≤ min(open, close) ≤
    /// max(open, close) ≤ high, and nonnegative volume.
    pub fn validate(&self) -> Result<()> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::Data(format!(
                "{}: prices must be positive and finite",
                self.date
            )));
        }
        if !(self.volume.is_finite() && self.volume >= 0.0) {
            return Err(Error::Data(format!(
                "{}: volume must be nonnegative, got {}",
                self.date, self.volume
            )));
        }
        let body_lo = self.open.min(self.close);
        let body_hi = self.open.max(self.close);
        if !(self.low <= body_lo && body_hi <= self.high) {
            return Err(Error::Data(format!(
                "{}: candle violates low {} <= min(o,c) {} <= max(o,c) {} <= high {}",
                self.date, self.low, body_lo, body_hi, self.high
            )));
        }
        Ok(())
    }
}

const COLUMNS: [&str; 6] = ["date", "open", "high", "low", "close", "volume"];

/// Parse OHLCV CSV bytes: header row naming the six columns in any order,
/// one candle per line. Rows come back date-sorted; malformed rows fail
/// with their line number, invariant violations and duplicate dates fail as
/// data errors.
pub fn parse_ohlcv_csv(bytes: &[u8]) -> Result<Vec<OhlcvRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: format!("unreadable header: {e}"),
        })?
        .clone();
    let mut index = [usize::MAX; 6];
    for (i, h) in headers.iter().enumerate() {
        if let Some(slot) = COLUMNS.iter().position(|c| c.eq_ignore_ascii_case(h)) {
            index[slot] = i;
        }
    }
    if let Some(missing) = (0..6).find(|&i| index[i] == usize::MAX) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("missing required column '{}'", COLUMNS[missing]),
        });
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(0);
            Error::Parse {
                line,
                msg: format!("malformed row: {e}"),
            }
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |slot: usize| -> Result<&str> {
            row.get(index[slot]).ok_or(Error::Parse {
                line,
                msg: format!("row too short: no '{}' field", COLUMNS[slot]),
            })
        };
        let date = NaiveDate::parse_from_str(field(0)?, "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            msg: format!("bad date '{}': {e}", field(0).unwrap_or("")),
        })?;
        let number = |slot: usize| -> Result<f64> {
            let raw = field(slot)?;
            raw.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("bad number '{raw}' in column '{}'", COLUMNS[slot]),
            })
        };
        let rec = OhlcvRecord {
            date,
            open: number(1)?,
            high: number(2)?,
            low: number(3)?,
            close: number(4)?,
            volume: number(5)?,
        };
        rec.validate()
            .map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        records.push(rec);
    }
    records.sort_by_key(|r| r.date);
    for pair in records.windows(2) {
        if pair[0].date == pair[1].date {
            return Err(Error::Data(format!("duplicate date {}", pair[0].date)));
        }
    }
    Ok(records)
}

/// Load and validate an OHLCV CSV file.
pub fn load_ohlcv_csv(path: &Path) -> Result<Vec<OhlcvRecord>> {
    let bytes = std::fs::read(path)?;
    parse_ohlcv_csv(&bytes)
}

/// Render records back to canonical CSV (sorted column order, shortest
/// round-trip float formatting — byte-deterministic).
pub fn ohlcv_to_csv(records: &[OhlcvRecord]) -> String {
    let mut out = String::from("date,open,high,low,close,volume\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.date, r.open, r.high, r.low, r.close, r.volume
        ));
    }
    out
}

/// Log-transformed series ready for enrichment, on a trading-day index grid.
#[derive(Debug, Clone)]
pub struct LogSeries {
    /// Log closing price at each trading day.
    pub prices: SnapshotSeries,
    /// Log volume aggregated over each inter-day interval (day k to k+1
    /// carries day k+1's volume).
    pub volumes: AggregateSeries,
    /// Day indices whose volume was floored at one share before the log.
    pub floored_volume_days: Vec<usize>,
    pub dates: Vec<NaiveDate>,
}

/// Log-transform validated records. Trading time is the day index, so the
/// grid is uniform regardless of calendar gaps.
pub fn to_log_series(records: &[OhlcvRecord]) -> Result<LogSeries> {
    if records.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "log series needs at least 2 days, got {}",
            records.len()
        )));
    }
    let n = records.len();
    let grid = TimeGrid::uniform(n)?;
    let prices: Vec<f64> = records.iter().map(|r| r.close.ln()).collect();
    let mut floored = Vec::new();
    let volumes: Vec<f64> = (1..n)
        .map(|k| {
            let v = records[k].volume;
            if v < 1.0 {
                floored.push(k);
            }
            v.max(1.0).ln()
        })
        .collect();
    Ok(LogSeries {
        prices: SnapshotSeries::new(grid.clone(), prices)?,
        volumes: AggregateSeries::new(grid, volumes)?,
        floored_volume_days: floored,
        dates: records.iter().map(|r| r.date).collect(),
    })
}

/// Synthetic market scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Steady drift plus noise.
    Trend,
    /// Ornstein–Uhlenbeck-style pull back to the starting level.
    MeanRevert,
    /// Rally into a peak, then a ~40% decline.
    Crash,
    /// Driftless geometric Brownian motion.
    Gbm,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trend" => Ok(SyntheticKind::Trend),
            "mean-revert" => Ok(SyntheticKind::MeanRevert),
            "crash" => Ok(SyntheticKind::Crash),
            "gbm" => Ok(SyntheticKind::Gbm),
            other => Err(Error::Config(format!(
                "unknown synthetic kind '{other}' (expected trend | mean-revert | crash | gbm)"
            ))),
        }
    }
}

/// Ground-truth per-day regime attached to synthetic series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeTag {
    TrendUp,
    MeanRevert,
    PreCrash,
    CrashDown,
    Gbm,
}

/// Generator knobs (days and per-day log-scale magnitudes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub days: usize,
    pub start_date: NaiveDate,
    pub start_price: f64,
    /// Per-day log drift (trend and the pre-crash rally).
    pub drift: f64,
    /// Per-day log-return noise.
    pub noise: f64,
    pub base_volume: f64,
    /// Log-space volume noise.
    pub volume_noise: f64,
    /// Crash scenario: fraction of value shed peak-to-trough.
    pub crash_depth: f64,
    /// Mean-reversion pull per day toward the starting level.
    pub revert_strength: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            days: 252,
            start_date: NaiveDate::from_ymd_opt(2020, 1, 2).unwrap(),
            start_price: 100.0,
            drift: 8e-4,
            noise: 0.01,
            base_volume: 1.0e6,
            volume_noise: 0.3,
            crash_depth: 0.4,
            revert_strength: 0.05,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.days < 2 {
            return Err(Error::Config(format!(
                "synthetic series needs at least 2 days, got {}",
                self.days
            )));
        }
        if !(self.start_price.is_finite() && self.start_price > 0.0) {
            return Err(Error::Config("start_price must be positive".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0)
            || !(self.volume_noise.is_finite() && self.volume_noise >= 0.0)
        {
            return Err(Error::Config("noise levels must be nonnegative".into()));
        }
        if !(self.crash_depth > 0.0 && self.crash_depth < 1.0) {
            return Err(Error::Config(format!(
                "crash_depth must lie in (0, 1), got {}",
                self.crash_depth
            )));
        }
        if !(self.revert_strength.is_finite() && (0.0..1.0).contains(&self.revert_strength)) {
            return Err(Error::Config("revert_strength must lie in [0, 1)".into()));
        }
        if !self.drift.is_finite() || !(self.base_volume.is_finite() && self.base_volume >= 1.0) {
            return Err(Error::Config("drift/base_volume out of range".into()));
        }
        Ok(())
    }
}

/// A generated series plus its ground-truth regimes (one tag per day).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSeries {
    pub records: Vec<OhlcvRecord>,
    pub regimes: Vec<RegimeTag>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller; u1 clamped away from zero.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn next_weekday(mut d: NaiveDate) -> NaiveDate {
    loop {
        d = d.succ_opt().expect("date overflow");
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            return d;
        }
    }
}

/// Generate a seeded synthetic OHLCV series. Identical (kind, params, seed)
/// inputs give bit-identical output.
pub fn generate_synthetic(
    kind: SyntheticKind,
    params: &SyntheticParams,
    seed: u64,
) -> Result<SyntheticSeries> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let days = params.days;
    let x0 = params.start_price.ln();

    // Log-close path and per-day regime tags.
    let mut log_close = Vec::with_capacity(days);
    let mut regimes = Vec::with_capacity(days);
    let mut x = x0;
    let crash_peak_day = (days * 3) / 5; // rally for 60% of the horizon
    let crash_days = days - crash_peak_day;
    for day in 0..days {
        let (step, tag) = match kind {
            SyntheticKind::Trend => (params.drift, RegimeTag::TrendUp),
            SyntheticKind::MeanRevert => {
                (params.revert_strength * (x0 - x), RegimeTag::MeanRevert)
            }
            SyntheticKind::Crash => {
                if day < crash_peak_day {
                    (params.drift, RegimeTag::PreCrash)
                } else {
                    // Spread ln(1 − depth) uniformly over the decline phase.
                    (
                        (1.0 - params.crash_depth).ln() / crash_days as f64,
                        RegimeTag::CrashDown,
                    )
                }
            }
            SyntheticKind::Gbm => (-0.5 * params.noise * params.noise, RegimeTag::Gbm),
        };
        if day > 0 {
            x += step + params.noise * gauss(&mut rng);
        }
        log_close.push(x);
        regimes.push(tag);
    }

    // Dress the path into candles on consecutive weekdays.
    let mut records = Vec::with_capacity(days);
    let mut date = params.start_date;
    if matches!(date.weekday(), Weekday::Sat | Weekday::Sun) {
        date = next_weekday(date);
    }
    let mut prev_close = params.start_price;
    for (day, &lx) in log_close.iter().enumerate() {
        let close = lx.exp();
        let open = if day == 0 { close } else { prev_close };
        let body_hi = open.max(close);
        let body_lo = open.min(close);
        let wick: f64 = rng.random::<f64>() * params.noise.max(1e-4);
        let high = body_hi * (1.0 + wick);
        let low = body_lo * (1.0 - wick);
        let volume =
            (params.base_volume.ln() + params.volume_noise * gauss(&mut rng)).exp().round();
        records.push(OhlcvRecord {
            date,
            open,
            high,
            low,
            close,
            volume,
        });
        prev_close = close;
        date = next_weekday(date);
    }
    for r in &records {
        r.validate()?;
    }
    Ok(SyntheticSeries { records, regimes })
}

/// Render tokens with their time stamps as CSV (one row per token, position
/// channels then volume channels).
pub fn tokens_to_csv(tokens: &[(f64, JointToken)]) -> String {
    let mut out = String::from("t,p0,p1,p2,p3,v0,v1,v2,v3,v4\n");
    for (t, tok) in tokens {
        out.push_str(&format!("{t}"));
        for v in tok.as_array() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Parse a token CSV produced by [`tokens_to_csv`]. Panic-free on
/// arbitrary bytes.
pub fn parse_token_csv(bytes: &[u8]) -> Result<Vec<(f64, JointToken)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader.headers().map_err(|e| Error::Parse {
        line: 1,
        msg: format!("unreadable header: {e}"),
    })?;
    if headers.len() != 10 || headers.get(0) != Some("t") {
        return Err(Error::Parse {
            line: 1,
            msg: "expected header t,p0,p1,p2,p3,v0,v1,v2,v3,v4".into(),
        });
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: format!("malformed row: {e}"),
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != 10 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 10 fields, got {}", row.len()),
            });
        }
        let mut values = [0.0f64; 10];
        for (i, v) in values.iter_mut().enumerate() {
            let raw = row.get(i).unwrap_or("");
            *v = raw.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad number '{raw}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite value '{raw}'"),
                });
            }
        }
        let mut channels = [0.0f64; 9];
        channels.copy_from_slice(&values[1..]);
        out.push((values[0], JointToken::from_array(channels)));
    }
    Ok(out)
}
