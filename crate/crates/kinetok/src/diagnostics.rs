//! Behavioral analysis of trained policies.
//!
//! Beyond headline returns, a trading classifier can fail in quiet ways: it
//! can collapse to a single action, liquidate once and never re-enter, or
//! report probabilities that do not track realized win rates. This module
//! measures those failure modes — action distributions, a two-sided
//! liquidation-equilibrium detector (action-space collapse vs portfolio
//! absorption), confusion matrices, calibration curves, and sensitivity
//! sweeps over the labeling threshold and transaction-cost assumptions.

use crate::backtest::{run_backtest, BacktestResult, CostModel, TaxSchedule, TradeSide};
use crate::error::{Error, Result};
use crate::labeling::{label_dataset, ActionLabel, Threshold};
use crate::series::{AggregateSeries, NoiseRatio, SnapshotSeries};
use crate::tokenizer::{NormStats, TokenizerKind};
use serde::{Deserialize, Serialize};

/// Share of the dominant action class at or above which the action space is
/// considered collapsed.
pub const COLLAPSE_SHARE: f64 = 0.99;

/// Class counts and the fraction of non-Hold predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    /// Counts indexed Buy, Sell, Hold.
    pub counts: [usize; 3],
    /// (Buy + Sell) / total.
    pub action_rate: f64,
}

impl ActionDistribution {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Most frequent class and its share of all predictions. Ties resolve
    /// to the lower class index (Buy < Sell < Hold).
    pub fn dominant(&self) -> (ActionLabel, f64) {
        let mut best = 0;
        for i in 1..3 {
            if self.counts[i] > self.counts[best] {
                best = i;
            }
        }
        (
            ActionLabel::from_index(best).unwrap(),
            self.counts[best] as f64 / self.total() as f64,
        )
    }
}

/// Count predictions per class.
pub fn action_distribution(predictions: &[ActionLabel]) -> Result<ActionDistribution> {
    if predictions.is_empty() {
        return Err(Error::InsufficientData(
            "action distribution of an empty prediction stream".into(),
        ));
    }
    let mut counts = [0usize; 3];
    for p in predictions {
        counts[p.index()] += 1;
    }
    let action_rate = (counts[0] + counts[1]) as f64 / predictions.len() as f64;
    Ok(ActionDistribution {
        counts,
        action_rate,
    })
}

/// Outcome of the liquidation-equilibrium detector. The two failure modes
/// are reported separately: a policy can collapse its action space without
/// being absorbed (e.g. 99% Buy while Long), and vice versa.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    /// The portfolio never left Cash: zero entries executed all period.
    pub portfolio_absorbed: bool,
    /// One class holds at least [`COLLAPSE_SHARE`] of all predictions.
    pub action_collapse: bool,
    pub dominant_class: ActionLabel,
    pub dominant_share: f64,
    pub entries_executed: usize,
    pub explanation: String,
}

impl EquilibriumReport {
    /// Headline flag: either failure mode present.
    pub fn flagged(&self) -> bool {
        self.portfolio_absorbed || self.action_collapse
    }
}

/// Detect the degenerate all-cash equilibrium and action-space collapse.
pub fn detect_liquidation_equilibrium(
    predictions: &[ActionLabel],
    result: &BacktestResult,
) -> Result<EquilibriumReport> {
    let dist = action_distribution(predictions)?;
    let (dominant_class, dominant_share) = dist.dominant();
    let entries_executed = result
        .trades
        .iter()
        .filter(|t| t.side == TradeSide::Buy)
        .count();
    let portfolio_absorbed = entries_executed == 0;
    let action_collapse = dominant_share >= COLLAPSE_SHARE;
    let explanation = match (portfolio_absorbed, action_collapse) {
        (true, true) => format!(
            "portfolio absorbed in cash (no entries executed) with action space \
             collapsed to {dominant_class} ({:.1}%)",
            dominant_share * 100.0
        ),
        (true, false) => "portfolio absorbed in cash: no entries executed all period".into(),
        (false, true) => format!(
            "action space collapsed to {dominant_class} ({:.1}%) but the portfolio \
             still traded",
            dominant_share * 100.0
        ),
        (false, false) => format!(
            "active policy: {entries_executed} entries, dominant class {dominant_class} \
             at {:.1}%",
            dominant_share * 100.0
        ),
    };
    Ok(EquilibriumReport {
        portfolio_absorbed,
        action_collapse,
        dominant_class,
        dominant_share,
        entries_executed,
        explanation,
    })
}

/// 3×3 confusion matrix: rows are true classes, columns predictions, both
/// indexed Buy, Sell, Hold.
pub fn confusion_matrix(
    predictions: &[ActionLabel],
    labels: &[ActionLabel],
) -> Result<[[usize; 3]; 3]> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = [[0usize; 3]; 3];
    for (p, l) in predictions.iter().zip(labels) {
        m[l.index()][p.index()] += 1;
    }
    Ok(m)
}

/// One calibration bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_predicted: f64,
    pub win_rate: f64,
    pub count: usize,
}

/// Reliability curve over equal-width probability bins (empty bins omitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationCurve {
    /// Largest |mean predicted − empirical| gap across bins.
    pub fn max_gap(&self) -> f64 {
        self.bins
            .iter()
            .map(|b| (b.mean_predicted - b.win_rate).abs())
            .fold(0.0, f64::max)
    }
}

/// Bin Buy-probability readings against realized outcomes ("win" = the next
/// interval's log-return was positive).
pub fn calibration_curve(
    buy_probs: &[f64],
    outcomes: &[bool],
    bins: usize,
) -> Result<CalibrationCurve> {
    if buy_probs.len() != outcomes.len() {
        return Err(Error::Shape(format!(
            "{} probabilities vs {} outcomes",
            buy_probs.len(),
            outcomes.len()
        )));
    }
    if bins < 2 {
        return Err(Error::Config(format!(
            "calibration needs at least 2 bins, got {bins}"
        )));
    }
    if let Some(bad) = buy_probs.iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
        return Err(Error::Data(format!(
            "probability {bad} outside [0, 1]"
        )));
    }
    let mut sums = vec![0.0f64; bins];
    let mut wins = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for (&p, &won) in buy_probs.iter().zip(outcomes) {
        let idx = ((p * bins as f64) as usize).min(bins - 1); // p = 1 joins the top bin
        sums[idx] += p;
        counts[idx] += 1;
        if won {
            wins[idx] += 1;
        }
    }
    let bins = (0..bins)
        .filter(|&i| counts[i] > 0)
        .map(|i| CalibrationBin {
            mean_predicted: sums[i] / counts[i] as f64,
            win_rate: wins[i] as f64 / counts[i] as f64,
            count: counts[i],
        })
        .collect();
    Ok(CalibrationCurve { bins })
}

/// Which knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Labeling threshold τ (re-labels the dataset per point).
    Tau,
    /// Transaction cost in basis points (re-runs the backtest per point).
    Bps,
}

/// One sweep row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub action_rate: f64,
    pub total_return: Option<f64>,
    pub sharpe: Option<f64>,
}

/// Rows of a sensitivity sweep along one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

fn require_increasing(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one axis value".into()));
    }
    if values.windows(2).any(|w| !(w[1] > w[0])) || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!(
            "sweep axis must be strictly increasing and finite: {values:?}"
        )));
    }
    Ok(())
}

/// Re-label the dataset at each threshold and report the label-level action
/// rate. Raising τ can only move returns from Buy/Sell into Hold, so the
/// rate is non-increasing along the axis.
#[allow(clippy::too_many_arguments)]
pub fn tau_sweep(
    prices: &SnapshotSeries,
    volumes: &AggregateSeries,
    taus: &[f64],
    t_len: usize,
    kind: TokenizerKind,
    noise: NoiseRatio,
    stats: &NormStats,
) -> Result<SweepResult> {
    require_increasing(taus)?;
    let mut points = Vec::with_capacity(taus.len());
    for &tau in taus {
        let labeled = label_dataset(prices, volumes, Threshold::new(tau)?, t_len, kind, noise, stats)?;
        let labels: Vec<ActionLabel> = labeled.iter().map(|l| l.label).collect();
        let dist = action_distribution(&labels)?;
        points.push(SweepPoint {
            value: tau,
            action_rate: dist.action_rate,
            total_return: None,
            sharpe: None,
        });
    }
    Ok(SweepResult {
        axis: SweepAxis::Tau,
        points,
    })
}

/// Re-run the backtest for a fixed action sequence at each cost level.
pub fn bps_sweep(
    actions: &[ActionLabel],
    closes: &[f64],
    bps_values: &[f64],
    tax: TaxSchedule,
    initial: f64,
) -> Result<SweepResult> {
    require_increasing(bps_values)?;
    let dist = action_distribution(actions)?;
    let mut points = Vec::with_capacity(bps_values.len());
    for &bps in bps_values {
        let result = run_backtest(actions, closes, CostModel::new(bps)?, tax, initial)?;
        points.push(SweepPoint {
            value: bps,
            action_rate: dist.action_rate,
            total_return: Some(result.metrics.total_return),
            sharpe: result.metrics.sharpe,
        });
    }
    Ok(SweepResult {
        axis: SweepAxis::Bps,
        points,
    })
}

/// First-order break-even cost for a strategy with a known total log-gain:
/// each round trip pays the rate twice, so costs cancel the edge when
/// rate ≈ total log-gain / (2 × round trips). Returned in basis points.
pub fn break_even_bps(total_log_gain: f64, round_trips: usize) -> Result<f64> {
    if round_trips == 0 {
        return Err(Error::DegenerateStats(
            "break-even undefined without trades".into(),
        ));
    }
    Ok(total_log_gain / (2.0 * round_trips as f64) * 10_000.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backtest::run_backtest;
    use crate::series::TimeGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use ActionLabel::{Buy, Hold, Sell};

    fn stream(counts: [usize; 3]) -> Vec<ActionLabel> {
        let mut v = Vec::new();
        for (i, &c) in counts.iter().enumerate() {
            v.extend(std::iter::repeat_n(ActionLabel::from_index(i).unwrap(), c));
        }
        v
    }

    #[test]
    fn action_rate_fixture() {
        let d = action_distribution(&stream([294, 228, 240])).unwrap();
        assert_eq!(d.counts, [294, 228, 240]);
        assert!((d.action_rate - 522.0 / 762.0).abs() < 1e-12);
        assert!((d.action_rate * 1000.0).round() / 10.0 == 68.5); // 68.5%
        let all_hold = action_distribution(&stream([0, 0, 50])).unwrap();
        assert_eq!(all_hold.action_rate, 0.0);
        assert!(action_distribution(&[]).is_err());
    }

    #[test]
    fn counts_match_independent_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let preds: Vec<ActionLabel> = (0..5000)
            .map(|_| ActionLabel::from_index(rng.random_range(0..3)).unwrap())
            .collect();
        let d = action_distribution(&preds).unwrap();
        // Oracle: separate single-pass recount.
        let mut tally = [0usize; 3];
        for p in &preds {
            match p {
                Buy => tally[0] += 1,
                Sell => tally[1] += 1,
                Hold => tally[2] += 1,
            }
        }
        assert_eq!(d.counts, tally);
        assert_eq!(d.total(), 5000);
    }

    #[test]
    fn always_sell_is_flagged_absorbed_and_collapsed() {
        let n = 762;
        let preds = vec![Sell; n];
        let closes: Vec<f64> = (0..n).map(|i| 100.0 + i as f64 * 0.1).collect();
        let result = run_backtest(
            &preds,
            &closes,
            CostModel::free(),
            TaxSchedule::default(),
            10_000.0,
        )
        .unwrap();
        let report = detect_liquidation_equilibrium(&preds, &result).unwrap();
        assert!(report.flagged());
        assert!(report.portfolio_absorbed);
        assert!(report.action_collapse);
        assert_eq!(report.dominant_class, Sell);
        assert_eq!(report.dominant_share, 1.0);
        assert_eq!(report.entries_executed, 0);
    }

    #[test]
    fn all_hold_from_cash_is_absorbed() {
        let preds = vec![Hold; 100];
        let closes = vec![100.0; 100];
        let result = run_backtest(
            &preds,
            &closes,
            CostModel::free(),
            TaxSchedule::default(),
            10_000.0,
        )
        .unwrap();
        let report = detect_liquidation_equilibrium(&preds, &result).unwrap();
        assert!(report.portfolio_absorbed);
        assert_eq!(report.dominant_class, Hold);
    }

    #[test]
    fn active_policy_with_round_trips_is_not_flagged() {
        // 12 round trips on a rising series: profitable and active.
        let n = 120;
        let closes: Vec<f64> = (0..n).map(|i| 100.0 * 1.005f64.powi(i as i32)).collect();
        let preds: Vec<ActionLabel> = (0..n)
            .map(|i| match i % 10 {
                0 => Buy,
                5 => Sell,
                _ => Hold,
            })
            .collect();
        let result = run_backtest(
            &preds,
            &closes,
            CostModel::free(),
            TaxSchedule::none(),
            10_000.0,
        )
        .unwrap();
        assert!(result.metrics.total_return > 0.0);
        assert!(result.trades.len() >= 20);
        let report = detect_liquidation_equilibrium(&preds, &result).unwrap();
        assert!(!report.flagged(), "{}", report.explanation);
    }

    #[test]
    fn collapse_threshold_is_99_percent() {
        let closes: Vec<f64> = (0..1000).map(|i| 100.0 + i as f64 * 0.01).collect();
        let make = |n_buy: usize| {
            let mut preds = vec![Sell; 1000];
            for p in preds.iter_mut().take(n_buy) {
                *p = Buy;
            }
            let result = run_backtest(
                &preds,
                &closes,
                CostModel::free(),
                TaxSchedule::none(),
                10_000.0,
            )
            .unwrap();
            detect_liquidation_equilibrium(&preds, &result).unwrap()
        };
        // 990/1000 Sell = exactly 99%: collapsed but not absorbed (the Buys execute).
        let at = make(10);
        assert!(at.action_collapse && !at.portfolio_absorbed);
        // 980/1000 = 98%: below the threshold.
        let below = make(20);
        assert!(!below.action_collapse);
    }

    #[test]
    fn confusion_matrix_shapes_and_marginals() {
        let labels = stream([3, 2, 4]);
        let perfect = confusion_matrix(&labels, &labels).unwrap();
        assert_eq!(perfect, [[3, 0, 0], [0, 2, 0], [0, 0, 4]]);

        let all_sell = vec![Sell; labels.len()];
        let m = confusion_matrix(&all_sell, &labels).unwrap();
        assert_eq!(m, [[0, 3, 0], [0, 2, 0], [0, 4, 0]]);

        // Row sums equal true-label counts for random data.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let preds: Vec<ActionLabel> = (0..300)
            .map(|_| ActionLabel::from_index(rng.random_range(0..3)).unwrap())
            .collect();
        let labels: Vec<ActionLabel> = (0..300)
            .map(|_| ActionLabel::from_index(rng.random_range(0..3)).unwrap())
            .collect();
        let m = confusion_matrix(&preds, &labels).unwrap();
        let label_counts = action_distribution(&labels).unwrap().counts;
        for i in 0..3 {
            assert_eq!(m[i].iter().sum::<usize>(), label_counts[i]);
        }
        assert!(confusion_matrix(&preds[..10], &labels).is_err());
    }

    #[test]
    fn calibration_converges_for_bernoulli_generator() {
        let mut rng = ChaCha8Rng::seed_from_u64(314159);
        let n = 100_000;
        let mut probs = Vec::with_capacity(n);
        let mut outcomes = Vec::with_capacity(n);
        for _ in 0..n {
            let p: f64 = rng.random();
            probs.push(p);
            outcomes.push(rng.random::<f64>() < p);
        }
        let curve = calibration_curve(&probs, &outcomes, 10).unwrap();
        assert_eq!(curve.bins.len(), 10);
        assert!(
            curve.max_gap() < 0.02,
            "max calibration gap {}",
            curve.max_gap()
        );
        let total: usize = curve.bins.iter().map(|b| b.count).sum();
        assert_eq!(total, n);
    }

    #[test]
    fn calibration_edge_cases() {
        // Constant p = 1, all wins: a single bin at (1, 1).
        let curve = calibration_curve(&[1.0; 20], &[true; 20], 10).unwrap();
        assert_eq!(curve.bins.len(), 1);
        assert_eq!(curve.bins[0].mean_predicted, 1.0);
        assert_eq!(curve.bins[0].win_rate, 1.0);
        assert_eq!(curve.bins[0].count, 20);

        // Order invariance.
        let probs = [0.1, 0.9, 0.4, 0.6, 0.25];
        let outs = [false, true, false, true, true];
        let fwd = calibration_curve(&probs, &outs, 4).unwrap();
        let mut rp = probs;
        rp.reverse();
        let mut ro = outs;
        ro.reverse();
        let rev = calibration_curve(&rp, &ro, 4).unwrap();
        assert_eq!(fwd, rev);

        assert!(matches!(
            calibration_curve(&[1.5], &[true], 10),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            calibration_curve(&[0.5], &[true], 1),
            Err(Error::Config(_))
        ));
        assert!(calibration_curve(&[0.5, 0.5], &[true], 10).is_err());
    }

    fn synthetic_series(n: usize, seed: u64) -> (SnapshotSeries, AggregateSeries) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = TimeGrid::uniform(n).unwrap();
        let mut p = 4.6f64;
        let prices: Vec<f64> = (0..n)
            .map(|_| {
                p += rng.random_range(-0.02..0.022);
                p
            })
            .collect();
        let vols: Vec<f64> = (0..n - 1).map(|_| rng.random_range(10.0..12.0)).collect();
        let vgrid = TimeGrid::uniform(n).unwrap();
        (
            SnapshotSeries::new(grid, prices).unwrap(),
            AggregateSeries::new(vgrid, vols).unwrap(),
        )
    }

    #[test]
    fn tau_sweep_action_rate_is_non_increasing() {
        let (prices, volumes) = synthetic_series(40, 11);
        let sweep = tau_sweep(
            &prices,
            &volumes,
            &[0.0025, 0.005, 0.01, 0.02],
            8,
            TokenizerKind::FiniteDifference,
            NoiseRatio::default(),
            &NormStats::identity(),
        )
        .unwrap();
        assert_eq!(sweep.axis, SweepAxis::Tau);
        assert_eq!(sweep.points.len(), 4);
        for w in sweep.points.windows(2) {
            assert!(
                w[1].action_rate <= w[0].action_rate + 1e-12,
                "action rate rose: {:?}",
                sweep.points
            );
        }
    }

    #[test]
    fn bps_sweep_return_strictly_decreasing_with_trades() {
        let n = 30;
        let closes: Vec<f64> = (0..n).map(|i| 100.0 * (1.0 + 0.01 * i as f64)).collect();
        let actions: Vec<ActionLabel> =
            (0..n).map(|i| if i % 2 == 0 { Buy } else { Sell }).collect();
        let sweep = bps_sweep(
            &actions,
            &closes,
            &[0.0, 5.0, 10.0, 20.0],
            TaxSchedule::none(),
            10_000.0,
        )
        .unwrap();
        for w in sweep.points.windows(2) {
            assert!(w[1].total_return.unwrap() < w[0].total_return.unwrap());
        }
    }

    #[test]
    fn sweep_axis_must_increase() {
        let closes = vec![100.0, 101.0];
        let actions = vec![Buy, Sell];
        assert!(bps_sweep(&actions, &closes, &[5.0, 5.0], TaxSchedule::none(), 1e4).is_err());
        assert!(bps_sweep(&actions, &closes, &[10.0, 5.0], TaxSchedule::none(), 1e4).is_err());
        assert!(bps_sweep(&actions, &closes, &[], TaxSchedule::none(), 1e4).is_err());
    }

    #[test]
    fn break_even_matches_direct_evaluation() {
        // 10 round trips, each a +0.4% log-gain: break-even at 20 bps.
        let per_trip = 0.004f64;
        let trips = 10usize;
        let be = break_even_bps(per_trip * trips as f64, trips).unwrap();
        assert!((be - 20.0).abs() < 1e-10);

        // Build that exact strategy and verify the sign flips around be.
        let mut closes = Vec::new();
        let mut actions = Vec::new();
        let mut price = 100.0f64;
        for _ in 0..trips {
            closes.push(price); // buy bar
            actions.push(Buy);
            price *= per_trip.exp();
            closes.push(price); // sell bar
            actions.push(Sell);
        }
        let ret_at = |bps: f64| {
            run_backtest(
                &actions,
                &closes,
                CostModel::new(bps).unwrap(),
                TaxSchedule::none(),
                10_000.0,
            )
            .unwrap()
            .metrics
            .total_return
        };
        assert!(ret_at(0.8 * be) > 0.0);
        assert!(ret_at(1.2 * be) < 0.0);
        assert!(break_even_bps(1.0, 0).is_err());
    }
}
