//! Ternary momentum labels and the class-weight definitions used by the loss.
//!
//! A window ending at t_j is labeled from the next interval's enriched price
//! move r_j = x(t_{j+1}) − x(t_j), where x comes from the label-time fit over
//! the window ending at t_{j+1} (for the spline tokenizer) or from the raw
//! log series (for the ablation tokenizers, whose position channel is the raw
//! value). The look-ahead observation at t_{j+1} feeds the label only — it is
//! never visible inside the input window.

use crate::enrichment::fit_snapshot_spline;
use crate::error::{Error, Result};
use crate::series::{AggregateSeries, NoiseRatio, SnapshotSeries, TimeGrid};
use crate::tokenizer::{rolling_tokenize, NormStats, TokenWindow, TokenizerKind};
use serde::{Deserialize, Serialize};

/// Trading decision classes, in the fixed index order used by the model head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionLabel {
    Buy,
    Sell,
    Hold,
}

impl ActionLabel {
    pub const ALL: [ActionLabel; 3] = [ActionLabel::Buy, ActionLabel::Sell, ActionLabel::Hold];

    /// Class index: Buy = 0, Sell = 1, Hold = 2.
    pub fn index(self) -> usize {
        match self {
            ActionLabel::Buy => 0,
            ActionLabel::Sell => 1,
            ActionLabel::Hold => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<ActionLabel> {
        Self::ALL.get(i).copied()
    }
}

impl std::fmt::Display for ActionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActionLabel::Buy => "Buy",
            ActionLabel::Sell => "Sell",
            ActionLabel::Hold => "Hold",
        })
    }
}

/// Dead-band half-width in log-return units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    tau: f64,
}

impl Threshold {
    pub const DEFAULT_TAU: f64 = 0.01;

    pub fn new(tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(Error::OutOfRange(format!(
                "threshold must be finite and nonnegative, got {tau}"
            )));
        }
        Ok(Threshold { tau })
    }

    pub fn tau(self) -> f64 {
        self.tau
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold {
            tau: Self::DEFAULT_TAU,
        }
    }
}

/// Per-class loss weights (Buy, Sell, Hold). The asymmetric default makes a
/// missed Sell an order of magnitude costlier than a missed Hold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w: [f64; 3],
}

impl LossWeights {
    pub fn new(w: [f64; 3]) -> Result<Self> {
        if let Some(bad) = w.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(Error::OutOfRange(format!(
                "loss weights must be finite and positive, got {bad}"
            )));
        }
        Ok(LossWeights { w })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w: [2.0, 10.0, 1.0],
        }
    }
}

/// An input window with its momentum label and the realized next-interval
/// log-return it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub window: TokenWindow,
    pub label: ActionLabel,
    pub r: f64,
}

/// Ternary momentum rule with strict inequalities: the boundary r = ±τ holds.
pub fn momentum_label(r: f64, tau: Threshold) -> ActionLabel {
    if r > tau.tau() {
        ActionLabel::Buy
    } else if r < -tau.tau() {
        ActionLabel::Sell
    } else {
        ActionLabel::Hold
    }
}

/// Next-interval enriched log-return for the window ending at knot `t_index`,
/// computed from the label-time window ending at `t_index + 1`.
fn lookahead_return(
    prices: &SnapshotSeries,
    t_index: usize,
    t_len: usize,
    kind: TokenizerKind,
    noise: NoiseRatio,
) -> Result<f64> {
    let target = t_index + 1;
    let knots = prices.grid().knots();
    match kind {
        TokenizerKind::Spline => {
            let lo = target - t_len;
            let grid = TimeGrid::new(knots[lo..=target].to_vec())?;
            let slice =
                SnapshotSeries::new(grid, prices.values()[lo..=target].to_vec())?;
            let (fit, _) = fit_snapshot_spline(&slice, noise)?;
            Ok(fit.eval(knots[target], 0)? - fit.eval(knots[t_index], 0)?)
        }
        // Ablation position channels are the raw log values.
        TokenizerKind::FiniteDifference | TokenizerKind::RawMasked => {
            Ok(prices.values()[target] - prices.values()[t_index])
        }
    }
}

/// Label every window the history supports: for each t_j with a full input
/// window behind it and one observation ahead of it, tokenize [t_j − T, t_j],
/// compute r_j from the label-time fit ending at t_{j+1}, and attach the
/// momentum label.
#[allow(clippy::too_many_arguments)]
pub fn label_dataset(
    prices: &SnapshotSeries,
    volumes: &AggregateSeries,
    tau: Threshold,
    t_len: usize,
    kind: TokenizerKind,
    noise: NoiseRatio,
    stats: &NormStats,
) -> Result<Vec<LabeledWindow>> {
    let n_knots = prices.grid().len();
    if n_knots < t_len + 2 {
        return Err(Error::InsufficientData(format!(
            "labeling needs at least {} observations ({} window + 1 look-ahead), got {n_knots}",
            t_len + 2,
            t_len + 1
        )));
    }
    let mut out = Vec::new();
    for t_index in t_len..n_knots - 1 {
        let window = rolling_tokenize(prices, volumes, t_index, t_len, kind, noise, stats)?;
        let r = lookahead_return(prices, t_index, t_len, kind, noise)?;
        out.push(LabeledWindow {
            window,
            label: momentum_label(r, tau),
            r,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn momentum_rule_cases() {
        let tau = Threshold::new(0.01).unwrap();
        assert_eq!(momentum_label(0.02, tau), ActionLabel::Buy);
        assert_eq!(momentum_label(-0.02, tau), ActionLabel::Sell);
        assert_eq!(momentum_label(0.005, tau), ActionLabel::Hold);
        // Strict inequality: the boundary itself holds.
        assert_eq!(momentum_label(0.01, tau), ActionLabel::Hold);
        assert_eq!(momentum_label(-0.01, tau), ActionLabel::Hold);
    }

    #[test]
    fn zero_threshold_leaves_no_holds_on_signed_returns() {
        let tau = Threshold::new(0.0).unwrap();
        for r in [0.3, -0.4, 1e-9, -1e-9] {
            assert_ne!(momentum_label(r, tau), ActionLabel::Hold, "r = {r}");
        }
        assert_eq!(momentum_label(0.0, tau), ActionLabel::Hold);
    }

    #[test]
    fn weights_and_threshold_validate() {
        assert!(Threshold::new(-0.01).is_err());
        assert!(LossWeights::new([2.0, 0.0, 1.0]).is_err());
        assert_eq!(LossWeights::default().w, [2.0, 10.0, 1.0]);
        assert_eq!(Threshold::default().tau(), 0.01);
    }

    fn synthetic(n: usize, seed: u64) -> (SnapshotSeries, AggregateSeries) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = TimeGrid::uniform(n + 1).unwrap();
        let prices = SnapshotSeries::new(
            grid.clone(),
            (0..=n)
                .map(|i| 4.0 + 0.004 * i as f64 + rng.random_range(-0.012..0.012))
                .collect(),
        )
        .unwrap();
        let volumes = AggregateSeries::new(
            grid,
            (0..n).map(|_| rng.random_range(9.5..10.5)).collect(),
        )
        .unwrap();
        (prices, volumes)
    }

    #[test]
    fn fd_labels_match_a_direct_return_scan() {
        let (p, v) = synthetic(100, 42);
        let t_len = 8;
        let tau = Threshold::new(0.005).unwrap();
        let data = label_dataset(
            &p,
            &v,
            tau,
            t_len,
            TokenizerKind::FiniteDifference,
            NoiseRatio::default(),
            &NormStats::identity(),
        )
        .unwrap();
        assert_eq!(data.len(), 100 - t_len); // windows at t_len .. 99

        // Independent oracle: scan raw returns directly.
        let mut counts = [0usize; 3];
        for j in t_len..100 {
            let r = p.values()[j + 1] - p.values()[j];
            let label = if r > tau.tau() {
                0
            } else if r < -tau.tau() {
                1
            } else {
                2
            };
            counts[label] += 1;
        }
        let mut got = [0usize; 3];
        for d in &data {
            got[d.label.index()] += 1;
        }
        assert_eq!(got, counts);
        assert!(got.iter().all(|&c| c > 0), "scan should hit all classes: {got:?}");
    }

    #[test]
    fn non_hold_fraction_shrinks_as_tau_grows() {
        let (p, v) = synthetic(120, 7);
        let mut last = f64::INFINITY;
        for tau in [0.0025, 0.005, 0.01, 0.02] {
            let data = label_dataset(
                &p,
                &v,
                Threshold::new(tau).unwrap(),
                8,
                TokenizerKind::Spline,
                NoiseRatio::default(),
                &NormStats::identity(),
            )
            .unwrap();
            let non_hold = data
                .iter()
                .filter(|d| d.label != ActionLabel::Hold)
                .count() as f64
                / data.len() as f64;
            assert!(non_hold <= last, "tau {tau}: {non_hold} > {last}");
            last = non_hold;
        }
    }

    #[test]
    fn negating_returns_swaps_buy_and_sell() {
        let (p, v) = synthetic(90, 13);
        let neg = SnapshotSeries::new(
            p.grid().clone(),
            p.values().iter().map(|y| -y).collect(),
        )
        .unwrap();
        let args = |series| {
            label_dataset(
                series,
                &v,
                Threshold::new(0.004).unwrap(),
                8,
                TokenizerKind::Spline,
                NoiseRatio::default(),
                &NormStats::identity(),
            )
            .unwrap()
        };
        let base = args(&p);
        let flipped = args(&neg);
        let count = |data: &[LabeledWindow], l: ActionLabel| {
            data.iter().filter(|d| d.label == l).count()
        };
        assert_eq!(count(&base, ActionLabel::Buy), count(&flipped, ActionLabel::Sell));
        assert_eq!(count(&base, ActionLabel::Sell), count(&flipped, ActionLabel::Buy));
        assert_eq!(count(&base, ActionLabel::Hold), count(&flipped, ActionLabel::Hold));
        for (a, b) in base.iter().zip(&flipped) {
            assert!((a.r + b.r).abs() < 1e-12);
        }
    }

    /// Removing the look-ahead observation must not change the input window —
    /// it only makes that window unlabelable.
    #[test]
    fn lookahead_feeds_labels_only() {
        let (p, v) = synthetic(60, 29);
        let t_len = 8;
        let full = label_dataset(
            &p,
            &v,
            Threshold::default(),
            t_len,
            TokenizerKind::Spline,
            NoiseRatio::default(),
            &NormStats::identity(),
        )
        .unwrap();

        // Truncate at the last labeled index's own knot: drop t_{j+1}.
        let keep = 60; // knots 0..=59 remain; window at 59 loses its label
        let tp = SnapshotSeries::new(
            TimeGrid::new(p.grid().knots()[..keep].to_vec()).unwrap(),
            p.values()[..keep].to_vec(),
        )
        .unwrap();
        let tv = AggregateSeries::new(
            tp.grid().clone(),
            v.values()[..keep - 1].to_vec(),
        )
        .unwrap();
        let truncated = label_dataset(
            &tp,
            &tv,
            Threshold::default(),
            t_len,
            TokenizerKind::Spline,
            NoiseRatio::default(),
            &NormStats::identity(),
        )
        .unwrap();
        assert_eq!(truncated.len(), full.len() - 1);
        for (a, b) in truncated.iter().zip(&full) {
            assert_eq!(a.window, b.window, "input tokens must be unaffected");
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn too_short_history_is_rejected() {
        let (p, v) = synthetic(8, 3);
        assert!(matches!(
            label_dataset(
                &p,
                &v,
                Threshold::default(),
                8,
                TokenizerKind::Spline,
                NoiseRatio::default(),
                &NormStats::identity(),
            ),
            Err(Error::InsufficientData(_))
        ));
    }
}
