//! Observation containers consumed by the enrichment layer.
//!
//! A [`TimeGrid`] fixes the knot locations shared by a fit. [`SnapshotSeries`]
//! holds point observations at the knots (log prices); [`AggregateSeries`]
//! holds one accumulated observation per inter-knot interval (log volume,
//! modeled as the integral of a latent intensity). [`NoiseRatio`] carries the
//! process-to-measurement noise ratio that trades smoothness against fidelity.

use crate::error::{Error, Result};

/// Strictly increasing, finite knot locations. At least two knots.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "time grid needs at least 2 knots, got {}",
                knots.len()
            )));
        }
        if let Some(bad) = knots.iter().find(|k| !k.is_finite()) {
            return Err(Error::GridOrder(format!("non-finite knot {bad}")));
        }
        for (i, pair) in knots.windows(2).enumerate() {
            if pair[1] <= pair[0] {
                return Err(Error::GridOrder(format!(
                    "knot {} ({}) must exceed knot {} ({})",
                    i + 1,
                    pair[1],
                    i,
                    pair[0]
                )));
            }
        }
        Ok(TimeGrid { knots })
    }

    /// Grid 0, 1, ..., n-1 (unit spacing).
    pub fn uniform(n: usize) -> Result<Self> {
        TimeGrid::new((0..n).map(|i| i as f64).collect())
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees >= 2 knots
    }

    pub fn interval_count(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.knots[0]
    }

    pub fn end(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    /// Width of interval `k` = [t_k, t_{k+1}].
    pub fn step(&self, k: usize) -> f64 {
        self.knots[k + 1] - self.knots[k]
    }

    /// Index of the interval containing `t`. Interior knots resolve to the
    /// right-hand interval; the final knot resolves to the last interval.
    pub fn locate(&self, t: f64) -> Result<usize> {
        if !t.is_finite() || t < self.start() || t > self.end() {
            return Err(Error::OutOfRange(format!(
                "t = {t} outside grid [{}, {}]",
                self.start(),
                self.end()
            )));
        }
        // partition_point: first knot strictly greater than t.
        let upper = self.knots.partition_point(|&k| k <= t);
        Ok(upper.saturating_sub(1).min(self.interval_count() - 1))
    }
}

/// Process-to-measurement noise ratio α = σ_p / σ_m.
///
/// Large α trusts observations (interpolation limit); small α trusts the
/// smoothness prior (straight-line limit).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseRatio {
    alpha: f64,
}

impl NoiseRatio {
    pub const DEFAULT_ALPHA: f64 = 5.0;

    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::OutOfRange(format!(
                "noise ratio must be finite and positive, got {alpha}"
            )));
        }
        Ok(NoiseRatio { alpha })
    }

    /// Build from the two noise scales directly: α = σ_p / σ_m.
    pub fn from_sigmas(sigma_p: f64, sigma_m: f64) -> Result<Self> {
        if !(sigma_p.is_finite() && sigma_p > 0.0 && sigma_m.is_finite() && sigma_m > 0.0) {
            return Err(Error::OutOfRange(format!(
                "noise scales must be finite and positive, got sigma_p={sigma_p}, sigma_m={sigma_m}"
            )));
        }
        NoiseRatio::new(sigma_p / sigma_m)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn alpha_sq(&self) -> f64 {
        self.alpha * self.alpha
    }
}

impl Default for NoiseRatio {
    fn default() -> Self {
        NoiseRatio {
            alpha: Self::DEFAULT_ALPHA,
        }
    }
}

/// Point observations at the knots of a grid (one value per knot).
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSeries {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl SnapshotSeries {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "snapshot series needs one value per knot: {} knots, {} values",
                grid.len(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite observation {bad}")));
        }
        Ok(SnapshotSeries { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Accumulated observations, one per inter-knot interval (value `k` covers
/// (t_k, t_{k+1}]). Each is modeled as the integral of a latent intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateSeries {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl AggregateSeries {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.interval_count() {
            return Err(Error::Shape(format!(
                "aggregate series needs one value per interval: {} intervals, {} values",
                grid.interval_count(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite observation {bad}")));
        }
        Ok(AggregateSeries { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}
