//! Kinematic token extraction, anchoring, normalization, and the ablation
//! tokenizers.
//!
//! A token is the per-interval coefficient block of the two fitted splines:
//! 4 price channels (position, velocity, acceleration, jerk) and 5 volume
//! channels, concatenated into a 9-vector. Windows are anchored by
//! subtracting the first token's position channels, then the 7 derivative
//! channels are z-scored against statistics frozen on the training corpus.
//!
//! Two ablation tokenizers produce the same 9-wide shape from raw log series:
//! backward finite differences (noise-amplifying discrete derivatives) and a
//! masked variant that zeroes everything above first order.

use crate::enrichment::{fit_aggregate_spline, fit_snapshot_spline};
use crate::error::{Error, Result};
use crate::series::{AggregateSeries, NoiseRatio, SnapshotSeries, TimeGrid};
use crate::spline::{CubicSpline, QuarticSpline};
use serde::{Deserialize, Serialize};

/// Width of every token: 4 price + 5 volume channels.
pub const TOKEN_DIM: usize = 9;

/// Indices of the derivative channels (everything except the two positions);
/// these are the channels covered by [`NormStats`].
pub const DERIVATIVE_CHANNELS: [usize; 7] = [1, 2, 3, 5, 6, 7, 8];

/// One interval's kinematic state: price block [c0..c3], volume block [c̃0..c̃4].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointToken {
    pub price: [f64; 4],
    pub volume: [f64; 5],
}

impl JointToken {
    pub fn zero() -> Self {
        JointToken {
            price: [0.0; 4],
            volume: [0.0; 5],
        }
    }

    /// Concatenated 9-vector, price channels first.
    pub fn as_array(&self) -> [f64; TOKEN_DIM] {
        [
            self.price[0],
            self.price[1],
            self.price[2],
            self.price[3],
            self.volume[0],
            self.volume[1],
            self.volume[2],
            self.volume[3],
            self.volume[4],
        ]
    }

    pub fn from_array(a: [f64; TOKEN_DIM]) -> Self {
        JointToken {
            price: [a[0], a[1], a[2], a[3]],
            volume: [a[4], a[5], a[6], a[7], a[8]],
        }
    }

    pub fn channel(&self, i: usize) -> f64 {
        if i < 4 {
            self.price[i]
        } else {
            self.volume[i - 4]
        }
    }

    pub fn set_channel(&mut self, i: usize, v: f64) {
        if i < 4 {
            self.price[i] = v;
        } else {
            self.volume[i - 4] = v;
        }
    }
}

/// Ordered token sequence covering consecutive intervals, with the time of
/// its first interval's left knot.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWindow {
    pub tokens: Vec<JointToken>,
    pub start_time: f64,
}

/// Frozen training-corpus statistics for the 7 derivative channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: [f64; 7],
    pub sigma: [f64; 7],
}

impl NormStats {
    pub fn new(mu: [f64; 7], sigma: [f64; 7]) -> Result<Self> {
        for (i, s) in sigma.iter().enumerate() {
            if !(s.is_finite() && *s > 0.0) {
                return Err(Error::DegenerateStats(format!(
                    "sigma for derivative channel {} must be positive, got {s}",
                    DERIVATIVE_CHANNELS[i]
                )));
            }
        }
        if let Some(bad) = mu.iter().find(|m| !m.is_finite()) {
            return Err(Error::DegenerateStats(format!("non-finite mean {bad}")));
        }
        Ok(NormStats { mu, sigma })
    }

    /// Identity stats (mu 0, sigma 1); normalization becomes a no-op.
    pub fn identity() -> Self {
        NormStats {
            mu: [0.0; 7],
            sigma: [1.0; 7],
        }
    }
}

/// Which token construction a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    /// Coefficients of freshly fitted smoothing splines.
    Spline,
    /// Backward finite differences of the raw log series.
    FiniteDifference,
    /// Finite differences with all higher-order channels masked to zero.
    RawMasked,
}

/// Pair each interval's price and volume coefficients into tokens.
/// Both splines must share one grid.
pub fn extract_joint_tokens(
    price_spline: &CubicSpline,
    volume_spline: &QuarticSpline,
) -> Result<Vec<JointToken>> {
    if price_spline.grid() != volume_spline.grid() {
        return Err(Error::Shape(
            "price and volume splines must share a grid".into(),
        ));
    }
    Ok(price_spline
        .coeffs()
        .iter()
        .zip(volume_spline.coeffs())
        .map(|(p, v)| JointToken {
            price: *p,
            volume: *v,
        })
        .collect())
}

/// Subtract the first token's position channels from every token, giving the
/// window a relative origin of (0, 0). Idempotent.
pub fn anchor_window(window: &TokenWindow) -> Result<TokenWindow> {
    let first = window
        .tokens
        .first()
        .ok_or_else(|| Error::InsufficientData("cannot anchor an empty window".into()))?;
    let (p0, v0) = (first.price[0], first.volume[0]);
    let tokens = window
        .tokens
        .iter()
        .map(|t| {
            let mut t = *t;
            t.price[0] -= p0;
            t.volume[0] -= v0;
            t
        })
        .collect();
    Ok(TokenWindow {
        tokens,
        start_time: window.start_time,
    })
}

/// Population mean/std of the 7 derivative channels over a training corpus,
/// accumulated online (Welford). Needs at least two tokens overall; a
/// zero-variance channel is reported as degenerate.
pub fn compute_global_stats<'a, I>(training_windows: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a TokenWindow>,
{
    let mut count = 0u64;
    let mut mean = [0.0f64; 7];
    let mut m2 = [0.0f64; 7];
    for window in training_windows {
        for token in &window.tokens {
            count += 1;
            for (i, &ch) in DERIVATIVE_CHANNELS.iter().enumerate() {
                let x = token.channel(ch);
                let delta = x - mean[i];
                mean[i] += delta / count as f64;
                m2[i] += delta * (x - mean[i]);
            }
        }
    }
    if count < 2 {
        return Err(Error::InsufficientData(format!(
            "global stats need at least 2 tokens, got {count}"
        )));
    }
    let mut sigma = [0.0f64; 7];
    for i in 0..7 {
        sigma[i] = (m2[i] / count as f64).sqrt();
        if !(sigma[i] > 0.0) {
            return Err(Error::DegenerateStats(format!(
                "derivative channel {} has zero variance over the training corpus",
                DERIVATIVE_CHANNELS[i]
            )));
        }
    }
    NormStats::new(mean, sigma)
}

/// Z-score the 7 derivative channels; anchored positions pass through.
pub fn zscore_normalize(window: &TokenWindow, stats: &NormStats) -> TokenWindow {
    let tokens = window
        .tokens
        .iter()
        .map(|t| {
            let mut t = *t;
            for (i, &ch) in DERIVATIVE_CHANNELS.iter().enumerate() {
                t.set_channel(ch, (t.channel(ch) - stats.mu[i]) / stats.sigma[i]);
            }
            t
        })
        .collect();
    TokenWindow {
        tokens,
        start_time: window.start_time,
    }
}

/// Inverse of [`zscore_normalize`].
pub fn zscore_denormalize(window: &TokenWindow, stats: &NormStats) -> TokenWindow {
    let tokens = window
        .tokens
        .iter()
        .map(|t| {
            let mut t = *t;
            for (i, &ch) in DERIVATIVE_CHANNELS.iter().enumerate() {
                t.set_channel(ch, t.channel(ch) * stats.sigma[i] + stats.mu[i]);
            }
            t
        })
        .collect();
    TokenWindow {
        tokens,
        start_time: window.start_time,
    }
}

/// n-th backward difference Δⁿy_k = Σ_i (−1)^i C(n,i) y_{k−i}, with zero
/// padding for indices before the start of the series.
pub fn backward_difference(values: &[f64], order: usize, k: usize) -> f64 {
    let mut acc = 0.0;
    let mut binom = 1.0f64; // C(order, i), updated multiplicatively
    for i in 0..=order {
        if i > 0 {
            binom *= (order - i + 1) as f64 / i as f64;
        }
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        if k >= i {
            acc += sign * binom * values[k - i];
        }
    }
    acc
}

fn check_fd_inputs(prices: &SnapshotSeries, volumes: &AggregateSeries) -> Result<()> {
    if prices.grid() != volumes.grid() {
        return Err(Error::Shape(
            "price and volume series must share a grid".into(),
        ));
    }
    if prices.values().len() < 5 {
        return Err(Error::InsufficientData(format!(
            "finite-difference tokens need at least 5 observations, got {}",
            prices.values().len()
        )));
    }
    Ok(())
}

/// Ablation tokenizer: discrete derivatives of the raw log series.
///
/// Token k covers interval [t_k, t_{k+1}); its price channels are the 0th–3rd
/// backward differences of log price ending at y_k, its volume channels the
/// 0th–4th differences of log volume ending at ỹ_k. Early positions without
/// enough history carry zeros in the affected channels.
pub fn finite_difference_tokens(
    prices: &SnapshotSeries,
    volumes: &AggregateSeries,
) -> Result<Vec<JointToken>> {
    check_fd_inputs(prices, volumes)?;
    let y = prices.values();
    let v = volumes.values();
    let mut tokens = Vec::with_capacity(v.len());
    for k in 0..v.len() {
        let mut token = JointToken::zero();
        for order in 0..4 {
            // Zero padding: orders that would reach before the series start.
            token.price[order] = if k >= order {
                backward_difference(y, order, k)
            } else {
                0.0
            };
        }
        for order in 0..5 {
            token.volume[order] = if k >= order {
                backward_difference(v, order, k)
            } else {
                0.0
            };
        }
        tokens.push(token);
    }
    Ok(tokens)
}

/// Ablation tokenizer: raw values and first differences only; acceleration
/// and above are masked to exactly zero. Shares the difference code path with
/// [`finite_difference_tokens`].
pub fn masked_raw_tokens(
    prices: &SnapshotSeries,
    volumes: &AggregateSeries,
) -> Result<Vec<JointToken>> {
    let mut tokens = finite_difference_tokens(prices, volumes)?;
    for t in &mut tokens {
        t.price[2] = 0.0;
        t.price[3] = 0.0;
        t.volume[2] = 0.0;
        t.volume[3] = 0.0;
        t.volume[4] = 0.0;
    }
    Ok(tokens)
}

/// Build the inference window ending at knot `t_index`: slice out exactly the
/// last `t_len + 1` prices and `t_len` volumes, tokenize that slice in
/// isolation (fresh spline fits for the spline kind), anchor, and normalize
/// with the frozen `stats`. Nothing after `t_index` is read, so appending
/// future observations can never change the output.
pub fn rolling_tokenize(
    prices: &SnapshotSeries,
    volumes: &AggregateSeries,
    t_index: usize,
    t_len: usize,
    kind: TokenizerKind,
    noise: NoiseRatio,
    stats: &NormStats,
) -> Result<TokenWindow> {
    if prices.grid() != volumes.grid() {
        return Err(Error::Shape(
            "price and volume series must share a grid".into(),
        ));
    }
    if t_len == 0 {
        return Err(Error::OutOfRange("window length must be positive".into()));
    }
    if t_index >= prices.grid().len() {
        return Err(Error::OutOfRange(format!(
            "t_index {t_index} beyond series of {} knots",
            prices.grid().len()
        )));
    }
    if t_index < t_len {
        return Err(Error::InsufficientData(format!(
            "window of {t_len} intervals ending at knot {t_index} needs {} observations",
            t_len + 1
        )));
    }
    let lo = t_index - t_len;
    let grid = TimeGrid::new(prices.grid().knots()[lo..=t_index].to_vec())?;
    let p_slice = SnapshotSeries::new(grid.clone(), prices.values()[lo..=t_index].to_vec())?;
    let v_slice = AggregateSeries::new(grid.clone(), volumes.values()[lo..t_index].to_vec())?;

    let tokens = match kind {
        TokenizerKind::Spline => {
            let (ps, _) = fit_snapshot_spline(&p_slice, noise)?;
            let (vs, _) = fit_aggregate_spline(&v_slice, noise)?;
            extract_joint_tokens(&ps, &vs)?
        }
        TokenizerKind::FiniteDifference => finite_difference_tokens(&p_slice, &v_slice)?,
        TokenizerKind::RawMasked => masked_raw_tokens(&p_slice, &v_slice)?,
    };
    let window = TokenWindow {
        tokens,
        start_time: grid.start(),
    };
    Ok(zscore_normalize(&anchor_window(&window)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fitted_pair(n: usize, seed: u64) -> (CubicSpline, QuarticSpline) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = TimeGrid::uniform(n + 1).unwrap();
        let prices = SnapshotSeries::new(
            grid.clone(),
            (0..=n).map(|i| 4.5 + 0.01 * i as f64 + rng.random_range(-0.02..0.02)).collect(),
        )
        .unwrap();
        let volumes = AggregateSeries::new(
            grid,
            (0..n).map(|_| rng.random_range(9.0..11.0)).collect(),
        )
        .unwrap();
        let noise = NoiseRatio::default();
        (
            fit_snapshot_spline(&prices, noise).unwrap().0,
            fit_aggregate_spline(&volumes, noise).unwrap().0,
        )
    }

    #[test]
    fn token_count_and_width_match_intervals() {
        let (p, v) = fitted_pair(64, 1);
        let tokens = extract_joint_tokens(&p, &v).unwrap();
        assert_eq!(tokens.len(), 64);
        assert_eq!(tokens[0].as_array().len(), 9);
    }

    #[test]
    fn tokens_reproduce_spline_state_at_left_knots() {
        let (p, v) = fitted_pair(12, 2);
        let tokens = extract_joint_tokens(&p, &v).unwrap();
        for (k, tok) in tokens.iter().enumerate() {
            let t = p.grid().knots()[k];
            for order in 0..4 {
                assert_eq!(tok.price[order], p.eval(t, order).unwrap(), "price {order}");
            }
            for order in 0..5 {
                assert_eq!(tok.volume[order], v.eval(t, order).unwrap(), "volume {order}");
            }
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let (p, _) = fitted_pair(8, 3);
        let (_, v) = fitted_pair(9, 3);
        assert!(matches!(
            extract_joint_tokens(&p, &v),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn anchoring_forces_zero_origin_and_is_idempotent() {
        let mut tokens: Vec<JointToken> = [4.6, 4.7, 4.65]
            .iter()
            .map(|&c0| {
                let mut t = JointToken::zero();
                t.price[0] = c0;
                t.volume[0] = c0 + 6.0;
                t.price[1] = 0.5; // derivative channels must pass through
                t
            })
            .collect();
        tokens[2].volume[3] = -1.25;
        let w = TokenWindow {
            tokens,
            start_time: 0.0,
        };
        let a = anchor_window(&w).unwrap();
        let expect = [0.0, 0.1, 0.05];
        for (tok, e) in a.tokens.iter().zip(expect) {
            assert!((tok.price[0] - e).abs() < 1e-12);
            assert!((tok.volume[0] - e).abs() < 1e-12);
            assert_eq!(tok.price[1], 0.5);
        }
        assert_eq!(a.tokens[0].price[0], 0.0);
        assert_eq!(a.tokens[0].volume[0], 0.0);
        assert_eq!(a.tokens[2].volume[3], -1.25);
        let aa = anchor_window(&a).unwrap();
        assert_eq!(aa, a);

        let empty = TokenWindow {
            tokens: vec![],
            start_time: 0.0,
        };
        assert!(anchor_window(&empty).is_err());
    }

    #[test]
    fn two_point_channel_stats() {
        let mut t1 = JointToken::zero();
        let mut t2 = JointToken::zero();
        for &ch in &DERIVATIVE_CHANNELS {
            t1.set_channel(ch, -1.0);
            t2.set_channel(ch, 1.0);
        }
        // Position channels must not influence the stats.
        t1.price[0] = 1e9;
        t2.volume[0] = -1e9;
        let w = TokenWindow {
            tokens: vec![t1, t2],
            start_time: 0.0,
        };
        let stats = compute_global_stats([&w]).unwrap();
        for i in 0..7 {
            assert!(stats.mu[i].abs() < 1e-12);
            assert!((stats.sigma[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let t = JointToken::zero();
        let w = TokenWindow {
            tokens: vec![t, t],
            start_time: 0.0,
        };
        assert!(matches!(
            compute_global_stats([&w]),
            Err(Error::DegenerateStats(_))
        ));
    }

    #[test]
    fn online_stats_match_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let windows: Vec<TokenWindow> = (0..1000)
            .map(|_| TokenWindow {
                tokens: (0..4)
                    .map(|_| {
                        let mut t = JointToken::zero();
                        for ch in 0..9 {
                            t.set_channel(ch, rng.random_range(-3.0..3.0) * (ch as f64 + 1.0));
                        }
                        t
                    })
                    .collect(),
                start_time: 0.0,
            })
            .collect();
        let stats = compute_global_stats(windows.iter()).unwrap();

        // Independent two-pass reduction.
        let all: Vec<&JointToken> = windows.iter().flat_map(|w| w.tokens.iter()).collect();
        let n = all.len() as f64;
        for (i, &ch) in DERIVATIVE_CHANNELS.iter().enumerate() {
            let mean = all.iter().map(|t| t.channel(ch)).sum::<f64>() / n;
            let var = all
                .iter()
                .map(|t| (t.channel(ch) - mean).powi(2))
                .sum::<f64>()
                / n;
            assert!((stats.mu[i] - mean).abs() < 1e-10, "channel {ch} mean");
            assert!((stats.sigma[i] - var.sqrt()).abs() < 1e-10, "channel {ch} sigma");
        }
    }

    #[test]
    fn zscore_round_trip_and_unit_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let windows: Vec<TokenWindow> = (0..50)
            .map(|_| TokenWindow {
                tokens: (0..8)
                    .map(|_| {
                        let mut t = JointToken::zero();
                        for ch in 0..9 {
                            t.set_channel(ch, rng.random_range(-2.0..2.0) + ch as f64);
                        }
                        t
                    })
                    .collect(),
                start_time: 0.0,
            })
            .collect();
        let stats = compute_global_stats(windows.iter()).unwrap();

        let normalized: Vec<TokenWindow> = windows
            .iter()
            .map(|w| zscore_normalize(w, &stats))
            .collect();
        // Positions untouched, round trip exact to 1e-10.
        for (w, n) in windows.iter().zip(&normalized) {
            for (a, b) in w.tokens.iter().zip(&n.tokens) {
                assert_eq!(a.price[0], b.price[0]);
                assert_eq!(a.volume[0], b.volume[0]);
            }
            let back = zscore_denormalize(n, &stats);
            for (a, b) in w.tokens.iter().zip(&back.tokens) {
                for ch in 0..9 {
                    assert!((a.channel(ch) - b.channel(ch)).abs() < 1e-10);
                }
            }
        }
        let restat = compute_global_stats(normalized.iter()).unwrap();
        for i in 0..7 {
            assert!(restat.mu[i].abs() < 1e-8);
            assert!((restat.sigma[i] - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn backward_difference_hand_values() {
        let y = [1.0, 3.0, 6.0];
        assert_eq!(backward_difference(&y, 1, 2), 3.0);
        assert_eq!(backward_difference(&y, 2, 2), 1.0);
        assert_eq!(backward_difference(&y, 0, 1), 3.0);
        // Δ³ at k=2 with zero padding for y_{-1}: 6 - 3·3 + 3·1 - 0 = 0
        assert_eq!(backward_difference(&y, 3, 2), 0.0);
    }

    fn raw_pair(n: usize, mut f: impl FnMut(usize) -> f64) -> (SnapshotSeries, AggregateSeries) {
        let grid = TimeGrid::uniform(n + 1).unwrap();
        let prices =
            SnapshotSeries::new(grid.clone(), (0..=n).map(&mut f).collect()).unwrap();
        let volumes =
            AggregateSeries::new(grid, (0..n).map(|i| 10.0 + f(i)).collect()).unwrap();
        (prices, volumes)
    }

    #[test]
    fn constant_series_has_zero_difference_channels() {
        let (p, v) = raw_pair(8, |_| 4.0);
        let tokens = finite_difference_tokens(&p, &v).unwrap();
        assert_eq!(tokens.len(), 8);
        for (k, t) in tokens.iter().enumerate() {
            assert_eq!(t.price[0], 4.0);
            for o in 1..4 {
                assert_eq!(t.price[o], 0.0, "token {k} price order {o}");
            }
            for o in 1..5 {
                assert_eq!(t.volume[o], 0.0);
            }
        }
    }

    #[test]
    fn short_series_is_rejected() {
        let (p, v) = raw_pair(3, |i| i as f64);
        assert!(matches!(
            finite_difference_tokens(&p, &v),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn masked_tokens_zero_high_orders_and_share_low_orders() {
        let (p, v) = raw_pair(10, |i| (i as f64 * 0.7).sin());
        let fd = finite_difference_tokens(&p, &v).unwrap();
        let masked = masked_raw_tokens(&p, &v).unwrap();
        for (f, m) in fd.iter().zip(&masked) {
            assert_eq!(m.price[0], f.price[0]);
            assert_eq!(m.price[1], f.price[1]);
            assert_eq!(m.volume[0], f.volume[0]);
            assert_eq!(m.volume[1], f.volume[1]);
            for &ch in &[2usize, 3, 6, 7, 8] {
                assert_eq!(m.channel(ch), 0.0, "channel {ch} must be masked");
            }
        }
    }

    fn history(n: usize, seed: u64) -> (SnapshotSeries, AggregateSeries) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        raw_pair(n, move |i| {
            4.0 + 0.02 * i as f64 + rng.random_range(-0.01..0.01)
        })
    }

    #[test]
    fn rolling_window_ignores_the_future() {
        let (p, v) = history(40, 5);
        let stats = NormStats::identity();
        let noise = NoiseRatio::default();
        for kind in [
            TokenizerKind::Spline,
            TokenizerKind::FiniteDifference,
            TokenizerKind::RawMasked,
        ] {
            let base = rolling_tokenize(&p, &v, 24, 16, kind, noise, &stats).unwrap();
            assert_eq!(base.tokens.len(), 16);
            // Mutate everything after knot 24 and re-run.
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut py = p.values().to_vec();
            let mut vy = v.values().to_vec();
            for x in py.iter_mut().skip(25) {
                *x = rng.random_range(-10.0..10.0);
            }
            for x in vy.iter_mut().skip(24) {
                *x = rng.random_range(-10.0..10.0);
            }
            let p2 = SnapshotSeries::new(p.grid().clone(), py).unwrap();
            let v2 = AggregateSeries::new(v.grid().clone(), vy).unwrap();
            let mutated = rolling_tokenize(&p2, &v2, 24, 16, kind, noise, &stats).unwrap();
            assert_eq!(base, mutated, "kind {kind:?} peeked at the future");
        }
    }

    #[test]
    fn consecutive_windows_share_their_overlap_slices() {
        let (p, v) = history(40, 6);
        // Overlapping raw inputs are literally the same slices.
        let a = &p.values()[20 - 16..=20];
        let b = &p.values()[21 - 16..=21];
        assert_eq!(&a[1..], &b[..16]);
        let va = &v.values()[20 - 16..20];
        let vb = &v.values()[21 - 16..21];
        assert_eq!(&va[1..], &vb[..15]);
        // And both calls succeed independently.
        let stats = NormStats::identity();
        let w20 = rolling_tokenize(&p, &v, 20, 16, TokenizerKind::Spline, NoiseRatio::default(), &stats).unwrap();
        let w21 = rolling_tokenize(&p, &v, 21, 16, TokenizerKind::Spline, NoiseRatio::default(), &stats).unwrap();
        assert_eq!(w20.tokens.len(), 16);
        assert_eq!(w21.start_time - w20.start_time, 1.0);
    }

    #[test]
    fn rolling_requires_enough_history() {
        let (p, v) = history(20, 7);
        assert!(matches!(
            rolling_tokenize(
                &p,
                &v,
                10,
                16,
                TokenizerKind::Spline,
                NoiseRatio::default(),
                &NormStats::identity()
            ),
            Err(Error::InsufficientData(_))
        ));
    }

    /// On noiseless, slowly varying cubic data the spline velocity channel and
    /// the first-difference channel agree to O(Δt).
    #[test]
    fn spline_and_fd_velocities_agree_on_smooth_data() {
        let n = 20;
        let f = |i: usize| {
            let t = i as f64 / n as f64;
            0.3 * t * t * t - 0.2 * t * t + 0.5 * t + 4.0
        };
        let (p, v) = raw_pair(n, f);
        let noise = NoiseRatio::new(1e4).unwrap();
        let (ps, _) = fit_snapshot_spline(&p, noise).unwrap();
        let (vs, _) = fit_aggregate_spline(&v, noise).unwrap();
        let spline_tokens = extract_joint_tokens(&ps, &vs).unwrap();
        let fd_tokens = finite_difference_tokens(&p, &v).unwrap();
        for k in 4..n - 2 {
            let d = (spline_tokens[k].price[1] - fd_tokens[k].price[1]).abs();
            assert!(d < 0.1, "token {k}: spline c1 vs FD delta differ by {d}");
        }
    }
}
