//! Deterministic single-asset portfolio simulation.
//!
//! A strict two-state machine (Cash / Long) consumes one action per bar and
//! executes market-on-close at that bar's price: Buy from Cash deploys the
//! entire cash balance (net of a per-side proportional cost), Sell from Long
//! liquidates everything, and every other (state, action) pair leaves the
//! portfolio untouched. Capital-gains tax is charged at fixed trading-day
//! boundaries on the year's positive net realized gains; if the portfolio is
//! still invested at a boundary the tax accrues as a liability and is
//! settled at the next liquidation rather than forcing a sale.
//!
//! Every run self-checks a cash-conservation identity to 1e-8: cash plus
//! position value must equal initial capital plus cumulative mark-to-market
//! P&L minus costs and taxes paid.

use crate::error::{Error, Result};
use crate::labeling::ActionLabel;
use serde::{Deserialize, Serialize};

/// Default annual risk-free rate used by the metrics report.
pub const DEFAULT_RISK_FREE: f64 = 0.04;
/// Trading days per year for annualization.
pub const TRADING_DAYS: f64 = 252.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Cash,
    Long,
}

/// Portfolio snapshot between bars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortfolioState {
    pub regime: Regime,
    pub cash: f64,
    pub shares: f64,
    /// Cash spent to open the current position (entry notional plus entry
    /// cost); realized gain at liquidation is net proceeds minus this.
    pub cost_basis: f64,
}

impl PortfolioState {
    pub fn all_cash(cash: f64) -> Self {
        PortfolioState {
            regime: Regime::Cash,
            cash,
            shares: 0.0,
            cost_basis: 0.0,
        }
    }
}

/// Proportional transaction cost in basis points of executed notional,
/// charged on each side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub bps: f64,
}

impl CostModel {
    pub fn new(bps: f64) -> Result<Self> {
        if !(bps.is_finite() && bps >= 0.0) {
            return Err(Error::OutOfRange(format!(
                "cost must be a nonnegative number of basis points, got {bps}"
            )));
        }
        Ok(CostModel { bps })
    }

    pub fn free() -> Self {
        CostModel { bps: 0.0 }
    }

    fn rate(&self) -> f64 {
        self.bps / 10_000.0
    }
}

/// Annual capital-gains tax: `rate` on positive net realized gains, charged
/// every `period` trading days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaxSchedule {
    pub rate: f64,
    pub period: usize,
}

impl TaxSchedule {
    pub fn new(rate: f64, period: usize) -> Result<Self> {
        if !(rate.is_finite() && (0.0..=1.0).contains(&rate)) {
            return Err(Error::OutOfRange(format!(
                "tax rate must lie in [0, 1], got {rate}"
            )));
        }
        if period == 0 {
            return Err(Error::OutOfRange("tax period must be at least 1 day".into()));
        }
        Ok(TaxSchedule { rate, period })
    }

    /// No tax at all (period pushed beyond any realistic horizon).
    pub fn none() -> Self {
        TaxSchedule {
            rate: 0.0,
            period: usize::MAX,
        }
    }
}

impl Default for TaxSchedule {
    fn default() -> Self {
        TaxSchedule {
            rate: 0.32,
            period: 252,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TradeSide {
    Buy,
    Sell,
}

/// One executed fill.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub time: usize,
    pub side: TradeSide,
    pub price: f64,
    pub shares: f64,
    /// shares × price.
    pub notional: f64,
    /// Transaction cost paid on this fill.
    pub cost: f64,
}

/// One FSM transition; total over all 6 (regime, action) pairs.
///
/// (Cash, Buy) enters Long with the full cash balance: shares are sized so
/// that notional plus the per-side cost consumes the cash exactly.
/// (Long, Sell) liquidates everything at the bar's close. The remaining four
/// pairs change nothing and produce no trade.
pub fn fsm_step(
    state: PortfolioState,
    action: ActionLabel,
    price: f64,
    cost: CostModel,
    time: usize,
) -> Result<(PortfolioState, Option<Trade>)> {
    if !(price.is_finite() && price > 0.0) {
        return Err(Error::Data(format!(
            "execution price must be positive and finite, got {price} at bar {time}"
        )));
    }
    match (state.regime, action) {
        (Regime::Cash, ActionLabel::Buy) => {
            if state.cash <= 0.0 {
                return Ok((state, None)); // nothing to deploy
            }
            let r = cost.rate();
            let notional = state.cash / (1.0 + r);
            let fee = state.cash - notional;
            let shares = notional / price;
            let next = PortfolioState {
                regime: Regime::Long,
                cash: 0.0,
                shares,
                cost_basis: state.cash,
            };
            let trade = Trade {
                time,
                side: TradeSide::Buy,
                price,
                shares,
                notional,
                cost: fee,
            };
            Ok((next, Some(trade)))
        }
        (Regime::Long, ActionLabel::Sell) => {
            let notional = state.shares * price;
            let fee = notional * cost.rate();
            let next = PortfolioState {
                regime: Regime::Cash,
                cash: state.cash + notional - fee,
                shares: 0.0,
                cost_basis: 0.0,
            };
            let trade = Trade {
                time,
                side: TradeSide::Sell,
                price,
                shares: state.shares,
                notional,
                cost: fee,
            };
            Ok((next, Some(trade)))
        }
        // (Cash, Sell), (Cash, Hold), (Long, Buy), (Long, Hold): unchanged.
        _ => Ok((state, None)),
    }
}

/// Performance summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// C_end / C_0 − 1.
    pub total_return: f64,
    /// Geometric annualization: (C_end / C_0)^(252/D) − 1.
    pub annualized_return: f64,
    /// Annualized population std of daily simple returns (√252 scaling).
    pub annualized_vol: f64,
    /// Annualized downside deviation: RMS of strictly negative daily
    /// returns, √252-scaled; zero when no down days.
    pub downside_deviation: f64,
    /// (R_p − R_f) / vol; absent when volatility is zero.
    pub sharpe: Option<f64>,
    /// (R_p − R_f) / downside deviation; absent when there are no down days.
    pub sortino: Option<f64>,
    /// Worst peak-to-trough loss, ≤ 0.
    pub max_drawdown: f64,
    /// Traded notional / average equity / years.
    pub annualized_turnover: f64,
    /// Fraction of non-Hold actions.
    pub action_rate: f64,
    pub risk_free: f64,
    /// Simulated trading days (equity curve length minus one).
    pub days: usize,
}

/// Full record of one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    /// Mark-to-market equity, one entry per day plus the initial value.
    pub equity_curve: Vec<f64>,
    pub trades: Vec<Trade>,
    /// Net realized P&L per tax year (last entry may cover a partial year).
    pub realized_pnl_by_year: Vec<f64>,
    /// Tax actually deducted from cash.
    pub taxes_paid: f64,
    /// Tax accrued but unsettled at the end of the run (still Long, or cash
    /// exhausted).
    pub tax_liability_outstanding: f64,
    pub action_counts: [usize; 3],
    pub final_state: PortfolioState,
    pub initial_capital: f64,
    pub metrics: MetricsReport,
}

/// Simulate a full action sequence against aligned closing prices.
///
/// Executes same-bar market-on-close, marks equity daily (net of any accrued
/// tax liability), charges tax at each `tax.period`-day boundary, and
/// verifies cash conservation to 1e-8 at every step.
pub fn run_backtest(
    actions: &[ActionLabel],
    closes: &[f64],
    cost: CostModel,
    tax: TaxSchedule,
    initial: f64,
) -> Result<BacktestResult> {
    if actions.len() != closes.len() {
        return Err(Error::Shape(format!(
            "{} actions vs {} closing prices",
            actions.len(),
            closes.len()
        )));
    }
    if actions.is_empty() {
        return Err(Error::InsufficientData(
            "backtest requires at least one bar".into(),
        ));
    }
    if !(initial.is_finite() && initial > 0.0) {
        return Err(Error::OutOfRange(format!(
            "initial capital must be positive, got {initial}"
        )));
    }

    let mut state = PortfolioState::all_cash(initial);
    let mut curve = Vec::with_capacity(actions.len() + 1);
    curve.push(initial);
    let mut trades = Vec::new();
    let mut realized_by_year = Vec::new();
    let mut year_realized = 0.0f64;
    let mut liability = 0.0f64;
    let mut taxes_paid = 0.0f64;
    let mut total_costs = 0.0f64;
    let mut action_counts = [0usize; 3];
    // Running mark-to-market P&L for the conservation identity.
    let mut cum_pnl = 0.0;
    let mut prev_close = None::<f64>;

    for (t, (&action, &price)) in actions.iter().zip(closes).enumerate() {
        action_counts[action.index()] += 1;
        if let Some(pc) = prev_close {
            cum_pnl += state.shares * (price - pc);
        }
        let before = state;
        let (after, trade) = fsm_step(before, action, price, cost, t)?;
        state = after;
        if let Some(tr) = trade {
            total_costs += tr.cost;
            if tr.side == TradeSide::Sell {
                year_realized += (tr.notional - tr.cost) - before.cost_basis;
                // A liquidation frees cash: settle accrued tax now.
                if liability > 0.0 {
                    let pay = liability.min(state.cash);
                    state.cash -= pay;
                    taxes_paid += pay;
                    liability -= pay;
                }
            }
            trades.push(tr);
        }

        // Tax-year boundary after this bar.
        if t + 1 != 0 && (t + 1) % tax.period == 0 {
            realized_by_year.push(year_realized);
            let due = tax.rate * year_realized.max(0.0);
            year_realized = 0.0;
            if due > 0.0 {
                match state.regime {
                    Regime::Cash => {
                        let pay = due.min(state.cash);
                        state.cash -= pay;
                        taxes_paid += pay;
                        liability += due - pay;
                    }
                    Regime::Long => liability += due,
                }
            }
        }

        let equity = state.cash + state.shares * price - liability;
        curve.push(equity);

        // Conservation: cash + position value = initial + P&L − costs − taxes
        // actually paid (accrued-but-unpaid tax has not moved cash yet).
        let lhs = state.cash + state.shares * price;
        let rhs = initial + cum_pnl - total_costs - taxes_paid;
        let drift = (lhs - rhs).abs();
        if drift > 1e-8 * initial.max(1.0) {
            return Err(Error::NumericalFailure(format!(
                "cash conservation violated at bar {t}: drift {drift:.3e}"
            )));
        }
        prev_close = Some(price);
    }
    if actions.len() % tax.period != 0 {
        realized_by_year.push(year_realized); // partial final year, untaxed
    }

    let mut result = BacktestResult {
        equity_curve: curve,
        trades,
        realized_pnl_by_year: realized_by_year,
        taxes_paid,
        tax_liability_outstanding: liability,
        action_counts,
        final_state: state,
        initial_capital: initial,
        metrics: MetricsReport {
            total_return: 0.0,
            annualized_return: 0.0,
            annualized_vol: 0.0,
            downside_deviation: 0.0,
            sharpe: None,
            sortino: None,
            max_drawdown: 0.0,
            annualized_turnover: 0.0,
            action_rate: 0.0,
            risk_free: DEFAULT_RISK_FREE,
            days: 0,
        },
    };
    result.metrics = compute_metrics(&result, DEFAULT_RISK_FREE)?;
    Ok(result)
}

/// Worst running-peak drawdown of an equity curve (≤ 0).
pub fn max_drawdown(curve: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &c in curve {
        peak = peak.max(c);
        if peak > 0.0 {
            worst = worst.min((c - peak) / peak);
        }
    }
    worst
}

/// Geometric annualization of a start-to-end growth over `days` trading days.
pub fn annualized_return(start: f64, end: f64, days: usize) -> f64 {
    if days == 0 || start <= 0.0 {
        return 0.0;
    }
    if end <= 0.0 {
        return -1.0; // total loss floor
    }
    (end / start).powf(TRADING_DAYS / days as f64) - 1.0
}

/// Traded notional over average equity per year elapsed.
pub fn annualized_turnover(result: &BacktestResult) -> Result<f64> {
    let days = result.equity_curve.len().saturating_sub(1);
    if days == 0 {
        return Err(Error::DegenerateStats(
            "turnover undefined over a zero-length period".into(),
        ));
    }
    let notional: f64 = result.trades.iter().map(|t| t.notional).sum();
    let avg_equity = result.equity_curve.iter().sum::<f64>() / result.equity_curve.len() as f64;
    if avg_equity <= 0.0 {
        return Err(Error::DegenerateStats(
            "turnover undefined for nonpositive average equity".into(),
        ));
    }
    let years = days as f64 / TRADING_DAYS;
    Ok(notional / avg_equity / years)
}

/// Risk metrics for a finished run. Degenerate cases (zero volatility, no
/// losing days) yield absent ratios rather than errors.
pub fn compute_metrics(result: &BacktestResult, risk_free: f64) -> Result<MetricsReport> {
    let curve = &result.equity_curve;
    if curve.len() < 2 {
        return Err(Error::InsufficientData(
            "metrics need an equity curve of at least two points".into(),
        ));
    }
    let days = curve.len() - 1;
    let c0 = curve[0];
    let c_end = *curve.last().unwrap();
    let total_return = c_end / c0 - 1.0;
    let r_p = annualized_return(c0, c_end, days);

    let daily: Vec<f64> = curve
        .windows(2)
        .map(|w| if w[0] != 0.0 { w[1] / w[0] - 1.0 } else { 0.0 })
        .collect();
    let mean = daily.iter().sum::<f64>() / daily.len() as f64;
    let var = daily.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / daily.len() as f64;
    let vol = var.sqrt() * TRADING_DAYS.sqrt();

    let negatives: Vec<f64> = daily.iter().copied().filter(|d| *d < 0.0).collect();
    let downside = if negatives.is_empty() {
        0.0
    } else {
        (negatives.iter().map(|d| d * d).sum::<f64>() / negatives.len() as f64).sqrt()
            * TRADING_DAYS.sqrt()
    };

    let sharpe = if vol > 0.0 {
        Some((r_p - risk_free) / vol)
    } else {
        None
    };
    let sortino = if downside > 0.0 {
        Some((r_p - risk_free) / downside)
    } else {
        None
    };

    let total_actions: usize = result.action_counts.iter().sum();
    let action_rate = if total_actions > 0 {
        (result.action_counts[0] + result.action_counts[1]) as f64 / total_actions as f64
    } else {
        0.0
    };

    Ok(MetricsReport {
        total_return,
        annualized_return: r_p,
        annualized_vol: vol,
        downside_deviation: downside,
        sharpe,
        sortino,
        max_drawdown: max_drawdown(curve),
        annualized_turnover: annualized_turnover(result)?,
        action_rate,
        risk_free,
        days,
    })
}
