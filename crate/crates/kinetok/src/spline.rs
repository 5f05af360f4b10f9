//! Piecewise polynomials in the factorial basis.
//!
//! On interval k with local time τ = t − t_k, a piece evaluates as
//! c0 + c1·τ + c2·τ²/2! + c3·τ³/3! (+ c4·τ⁴/4! for the quartic family), so
//! coefficient j is exactly the j-th derivative at the left knot. Derivatives
//! therefore reduce to a coefficient shift, which is what the tokenizer
//! exploits to read kinematic state directly out of a fit.

use crate::error::{Error, Result};
use crate::series::TimeGrid;

/// Evaluate Σ c[j+order] τ^j / j! via Horner on the shifted coefficients.
fn eval_factorial_piece(coeffs: &[f64], tau: f64, order: usize) -> f64 {
    if order >= coeffs.len() {
        return 0.0;
    }
    let shifted = &coeffs[order..];
    let mut acc = shifted[shifted.len() - 1];
    for j in (0..shifted.len() - 1).rev() {
        // Dividing by (j+1) at each step builds the factorial denominators.
        acc = shifted[j] + acc * tau / (j + 1) as f64;
    }
    acc
}

/// Largest jump of the piece values/derivatives across interior knots.
fn continuity_mismatch_impl<const M: usize>(
    grid: &TimeGrid,
    coeffs: &[[f64; M]],
    max_order: usize,
) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..grid.interval_count() - 1 {
        let h = grid.step(k);
        for order in 0..=max_order {
            let left = eval_factorial_piece(&coeffs[k], h, order);
            let right = eval_factorial_piece(&coeffs[k + 1], 0.0, order);
            worst = worst.max((left - right).abs());
        }
    }
    worst
}

/// Natural cubic spline over a [`TimeGrid`], one coefficient quadruple
/// (value, velocity, acceleration, jerk at the left knot) per interval.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    grid: TimeGrid,
    coeffs: Vec<[f64; 4]>,
}

impl CubicSpline {
    pub fn new(grid: TimeGrid, coeffs: Vec<[f64; 4]>) -> Result<Self> {
        if coeffs.len() != grid.interval_count() {
            return Err(Error::Shape(format!(
                "cubic spline needs one coefficient block per interval: {} intervals, {} blocks",
                grid.interval_count(),
                coeffs.len()
            )));
        }
        Ok(CubicSpline { grid, coeffs })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn coeffs(&self) -> &[[f64; 4]] {
        &self.coeffs
    }

    /// Value (`order == 0`) or derivative of the spline at `t`.
    ///
    /// `t` must lie inside the grid span; at interior knots the right-hand
    /// piece is used. Orders beyond the cubic degree return exactly 0.
    pub fn eval(&self, t: f64, order: usize) -> Result<f64> {
        let k = self.grid.locate(t)?;
        Ok(eval_factorial_piece(
            &self.coeffs[k],
            t - self.grid.knots()[k],
            order,
        ))
    }

    /// Largest value/derivative jump across interior knots up to order 2.
    /// A valid C² fit keeps this at round-off level.
    pub fn continuity_mismatch(&self) -> f64 {
        if self.grid.interval_count() < 2 {
            return 0.0;
        }
        continuity_mismatch_impl(&self.grid, &self.coeffs, 2)
    }
}

/// Quartic spline over a [`TimeGrid`], one coefficient quintuple per interval.
/// Used for accumulated observations, where measurements constrain integrals
/// of the curve rather than point values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuarticSpline {
    grid: TimeGrid,
    coeffs: Vec<[f64; 5]>,
}

impl QuarticSpline {
    pub fn new(grid: TimeGrid, coeffs: Vec<[f64; 5]>) -> Result<Self> {
        if coeffs.len() != grid.interval_count() {
            return Err(Error::Shape(format!(
                "quartic spline needs one coefficient block per interval: {} intervals, {} blocks",
                grid.interval_count(),
                coeffs.len()
            )));
        }
        Ok(QuarticSpline { grid, coeffs })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn coeffs(&self) -> &[[f64; 5]] {
        &self.coeffs
    }

    /// Value (`order == 0`) or derivative of the spline at `t`. Same knot
    /// conventions as [`CubicSpline::eval`]; orders beyond 4 return exactly 0.
    pub fn eval(&self, t: f64, order: usize) -> Result<f64> {
        let k = self.grid.locate(t)?;
        Ok(eval_factorial_piece(
            &self.coeffs[k],
            t - self.grid.knots()[k],
            order,
        ))
    }

    /// Exact integral of the spline over interval `k` (antiderivative of the
    /// factorial basis evaluated at the interval width).
    pub fn interval_integral(&self, k: usize) -> f64 {
        let h = self.grid.step(k);
        let c = &self.coeffs[k];
        // ∫0..h Σ c_j τ^j/j! dτ = Σ c_j h^{j+1}/(j+1)!
        let mut acc = c[4] / 5.0;
        for j in (0..4).rev() {
            acc = (c[j] + acc * h) / (j + 1) as f64;
        }
        acc * h
    }

    /// Largest value/derivative jump across interior knots up to order 2.
    pub fn continuity_mismatch(&self) -> f64 {
        if self.grid.interval_count() < 2 {
            return 0.0;
        }
        continuity_mismatch_impl(&self.grid, &self.coeffs, 2)
    }
}

/// Solve-quality report attached to every fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    /// Measurement residuals, one per observation (observed minus fitted).
    pub residuals: Vec<f64>,
    /// Objective value at the solution, in the unnormalized problem scale.
    pub objective_value: f64,
    /// Scaled infinity-norm residual of the first-order optimality system.
    pub kkt_residual: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid4() -> TimeGrid {
        TimeGrid::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn factorial_basis_derivative_is_coefficient_shift() {
        // x(τ) = 1 + 2τ + 4τ²/2 + 6τ³/6
        let s = CubicSpline::new(
            TimeGrid::new(vec![0.0, 2.0]).unwrap(),
            vec![[1.0, 2.0, 4.0, 6.0]],
        )
        .unwrap();
        assert_eq!(s.eval(0.0, 0).unwrap(), 1.0);
        assert_eq!(s.eval(0.0, 1).unwrap(), 2.0);
        assert_eq!(s.eval(0.0, 2).unwrap(), 4.0);
        assert_eq!(s.eval(0.0, 3).unwrap(), 6.0);
        // x(1) = 1 + 2 + 2 + 1 = 6, x'(1) = 2 + 4 + 3 = 9, x''(1) = 4 + 6 = 10
        assert!((s.eval(1.0, 0).unwrap() - 6.0).abs() < 1e-15);
        assert!((s.eval(1.0, 1).unwrap() - 9.0).abs() < 1e-15);
        assert!((s.eval(1.0, 2).unwrap() - 10.0).abs() < 1e-15);
        assert_eq!(s.eval(1.0, 4).unwrap(), 0.0);
        assert_eq!(s.eval(1.0, 9).unwrap(), 0.0);
    }

    #[test]
    fn eval_outside_span_is_an_error() {
        let s = CubicSpline::new(grid4(), vec![[0.0; 4]; 3]).unwrap();
        assert!(matches!(s.eval(-0.1, 0), Err(Error::OutOfRange(_))));
        assert!(matches!(s.eval(3.1, 0), Err(Error::OutOfRange(_))));
        assert!(s.eval(3.0, 0).is_ok());
    }

    #[test]
    fn interior_knot_uses_right_piece() {
        // Deliberately discontinuous pieces to expose which one eval picks.
        let s = CubicSpline::new(
            grid4(),
            vec![
                [0.0, 0.0, 0.0, 0.0],
                [5.0, 0.0, 0.0, 0.0],
                [7.0, 0.0, 0.0, 0.0],
            ],
        )
        .unwrap();
        assert_eq!(s.eval(1.0, 0).unwrap(), 5.0);
        assert_eq!(s.eval(2.0, 0).unwrap(), 7.0);
        assert_eq!(s.eval(3.0, 0).unwrap(), 7.0); // final knot: last piece
        assert_eq!(s.continuity_mismatch(), 5.0);
    }

    #[test]
    fn quartic_interval_integral_matches_closed_form() {
        // x(τ) = 3 + τ²/2 over [0, 2]: ∫ = 3·2 + 2³/6 = 6 + 4/3
        let s = QuarticSpline::new(
            TimeGrid::new(vec![0.0, 2.0]).unwrap(),
            vec![[3.0, 0.0, 1.0, 0.0, 0.0]],
        )
        .unwrap();
        assert!((s.interval_integral(0) - (6.0 + 4.0 / 3.0)).abs() < 1e-14);
        // quartic term: ∫0..h τ⁴/24 = h⁵/120
        let q = QuarticSpline::new(
            TimeGrid::new(vec![0.0, 2.0]).unwrap(),
            vec![[0.0, 0.0, 0.0, 0.0, 1.0]],
        )
        .unwrap();
        assert!((q.interval_integral(0) - 32.0 / 120.0).abs() < 1e-14);
    }

    #[test]
    fn quartic_high_order_derivatives_vanish() {
        let s = QuarticSpline::new(
            TimeGrid::new(vec![0.0, 1.0]).unwrap(),
            vec![[1.0, 1.0, 1.0, 1.0, 1.0]],
        )
        .unwrap();
        assert_eq!(s.eval(0.5, 4).unwrap(), 1.0);
        assert_eq!(s.eval(0.5, 5).unwrap(), 0.0);
    }
}
