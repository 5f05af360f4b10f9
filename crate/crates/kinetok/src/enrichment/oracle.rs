//! Brute-force dense reference solver for the smoothing-spline QPs.
//!
//! Deliberately independent of the production path: the forcing parameters
//! and measurement residuals stay explicit optimization variables (tied to
//! the polynomial coefficients by dynamics constraints), every integral is
//! evaluated by Gauss–Legendre quadrature instead of closed forms, the
//! objective is kept in its original scale, and the full KKT matrix is solved
//! by generic dense LU. Intended for tests on small instances only.

use crate::error::{Error, Result};
use crate::series::{AggregateSeries, NoiseRatio, SnapshotSeries};
use crate::spline::{CubicSpline, QuarticSpline};
use nalgebra::{DMatrix, DVector};

const MAX_ORACLE_KNOTS: usize = 64;

/// 2-point Gauss–Legendre rule on [0, h]: exact through cubic integrands.
fn gauss2(h: f64) -> [(f64, f64); 2] {
    let c = h / 2.0;
    let d = h / (2.0 * 3.0f64.sqrt());
    [(c - d, c), (c + d, c)]
}

/// 3-point Gauss–Legendre rule on [0, h]: exact through quintic integrands.
fn gauss3(h: f64) -> [(f64, f64); 3] {
    let c = h / 2.0;
    let d = c * (3.0f64 / 5.0).sqrt();
    [
        (c - d, 5.0 * h / 18.0),
        (c, 8.0 * h / 18.0),
        (c + d, 5.0 * h / 18.0),
    ]
}

fn solve_dense_kkt(
    h: DMatrix<f64>,
    a: DMatrix<f64>,
    rhs_constraints: DVector<f64>,
) -> Result<DVector<f64>> {
    let nx = h.nrows();
    let mc = a.nrows();
    let dim = nx + mc;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    kkt.view_mut((0, 0), (nx, nx)).copy_from(&h);
    kkt.view_mut((nx, 0), (mc, nx)).copy_from(&a);
    kkt.view_mut((0, nx), (nx, mc)).copy_from(&a.transpose());
    let mut rhs = DVector::<f64>::zeros(dim);
    rhs.rows_mut(nx, mc).copy_from(&rhs_constraints);
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NumericalFailure("singular dense KKT system".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure(
            "non-finite dense KKT solution".into(),
        ));
    }
    Ok(sol)
}

/// Dense reference solve of the snapshot problem. Returns the fitted spline
/// and the objective value (original scale).
pub fn dense_snapshot_oracle(
    series: &SnapshotSeries,
    noise: NoiseRatio,
) -> Result<(CubicSpline, f64)> {
    let grid = series.grid();
    if grid.len() > MAX_ORACLE_KNOTS {
        return Err(Error::Config(format!(
            "dense oracle supports at most {MAX_ORACLE_KNOTS} knots, got {}",
            grid.len()
        )));
    }
    let y = series.values();
    let n = grid.interval_count();
    // Variables: 4 coefficients per interval, then (a_k, b_k) forcing
    // parameters (v = a + b τ), then residuals w_0..w_n.
    let c_of = |k: usize, j: usize| 4 * k + j;
    let v_of = |k: usize, j: usize| 4 * n + 2 * k + j;
    let w_of = |k: usize| 6 * n + k;
    let nx = 7 * n + 1;

    let mut hess = DMatrix::<f64>::zeros(nx, nx);
    for k in 0..n {
        // ∫ ½ v² with v = a + b τ, by quadrature.
        for (tau, wgt) in gauss2(grid.step(k)) {
            let phi = [1.0, tau];
            for i in 0..2 {
                for j in 0..2 {
                    hess[(v_of(k, i), v_of(k, j))] += wgt * phi[i] * phi[j];
                }
            }
        }
    }
    for k in 0..=n {
        hess[(w_of(k), w_of(k))] = noise.alpha_sq();
    }

    let mc = 3 * n.saturating_sub(1) + 2 * n + (n + 1);
    let mut a = DMatrix::<f64>::zeros(mc, nx);
    let mut rhs = DVector::<f64>::zeros(mc);
    let mut row = 0;
    for k in 0..n.saturating_sub(1) {
        let h = grid.step(k);
        let e = [1.0, h, h * h / 2.0, h * h * h / 6.0];
        for order in 0..3 {
            for j in order..4 {
                // derivative of the factorial basis = shifted basis
                a[(row, c_of(k, j))] = e[j - order];
            }
            a[(row, c_of(k + 1, order))] = -1.0;
            row += 1;
        }
    }
    for k in 0..n {
        // Dynamics: the forcing must equal the curve's second derivative,
        // v(0) = c2 and v'(0) = c3.
        a[(row, v_of(k, 0))] = 1.0;
        a[(row, c_of(k, 2))] = -1.0;
        row += 1;
        a[(row, v_of(k, 1))] = 1.0;
        a[(row, c_of(k, 3))] = -1.0;
        row += 1;
    }
    for k in 0..n {
        // Measurement: x(t_k) + w_k = y_k.
        a[(row, c_of(k, 0))] = 1.0;
        a[(row, w_of(k))] = 1.0;
        rhs[row] = y[k];
        row += 1;
    }
    {
        let h = grid.step(n - 1);
        let e = [1.0, h, h * h / 2.0, h * h * h / 6.0];
        for j in 0..4 {
            a[(row, c_of(n - 1, j))] = e[j];
        }
        a[(row, w_of(n))] = 1.0;
        rhs[row] = y[n];
        row += 1;
    }
    debug_assert_eq!(row, mc);

    let sol = solve_dense_kkt(hess, a, rhs)?;
    let coeffs: Vec<[f64; 4]> = (0..n)
        .map(|k| {
            [
                sol[c_of(k, 0)],
                sol[c_of(k, 1)],
                sol[c_of(k, 2)],
                sol[c_of(k, 3)],
            ]
        })
        .collect();
    // Objective from the explicit v and w variables, quadrature again.
    let mut objective = 0.0;
    for k in 0..n {
        let (av, bv) = (sol[v_of(k, 0)], sol[v_of(k, 1)]);
        for (tau, wgt) in gauss2(grid.step(k)) {
            let v = av + bv * tau;
            objective += 0.5 * wgt * v * v;
        }
    }
    for k in 0..=n {
        objective += 0.5 * noise.alpha_sq() * sol[w_of(k)] * sol[w_of(k)];
    }
    Ok((CubicSpline::new(grid.clone(), coeffs)?, objective))
}

/// Dense reference solve of the aggregate problem.
pub fn dense_aggregate_oracle(
    series: &AggregateSeries,
    noise: NoiseRatio,
) -> Result<(QuarticSpline, f64)> {
    let grid = series.grid();
    if grid.len() > MAX_ORACLE_KNOTS {
        return Err(Error::Config(format!(
            "dense oracle supports at most {MAX_ORACLE_KNOTS} knots, got {}",
            grid.len()
        )));
    }
    let y = series.values();
    let n = grid.interval_count();
    // Variables: 5 coefficients per interval, (a, b, d) forcing parameters
    // (v = a + b τ + d τ²/2), then one residual per interval.
    let c_of = |k: usize, j: usize| 5 * k + j;
    let v_of = |k: usize, j: usize| 5 * n + 3 * k + j;
    let w_of = |k: usize| 8 * n + k;
    let nx = 9 * n;

    let mut hess = DMatrix::<f64>::zeros(nx, nx);
    for k in 0..n {
        for (tau, wgt) in gauss3(grid.step(k)) {
            let phi = [1.0, tau, tau * tau / 2.0];
            for i in 0..3 {
                for j in 0..3 {
                    hess[(v_of(k, i), v_of(k, j))] += wgt * phi[i] * phi[j];
                }
            }
        }
    }
    for k in 0..n {
        hess[(w_of(k), w_of(k))] = noise.alpha_sq();
    }

    let mc = 3 * n.saturating_sub(1) + 3 * n + n;
    let mut a = DMatrix::<f64>::zeros(mc, nx);
    let mut rhs = DVector::<f64>::zeros(mc);
    let mut row = 0;
    for k in 0..n.saturating_sub(1) {
        let h = grid.step(k);
        let e = [
            1.0,
            h,
            h * h / 2.0,
            h * h * h / 6.0,
            h * h * h * h / 24.0,
        ];
        for order in 0..3 {
            for j in order..5 {
                a[(row, c_of(k, j))] = e[j - order];
            }
            a[(row, c_of(k + 1, order))] = -1.0;
            row += 1;
        }
    }
    for k in 0..n {
        for (j, coeff_idx) in [2usize, 3, 4].into_iter().enumerate() {
            a[(row, v_of(k, j))] = 1.0;
            a[(row, c_of(k, coeff_idx))] = -1.0;
            row += 1;
        }
    }
    for k in 0..n {
        // Measurement: ∫ x̃ over interval k (by quadrature) + w̃_k = ỹ_k.
        for (tau, wgt) in gauss3(grid.step(k)) {
            let phi = [
                1.0,
                tau,
                tau * tau / 2.0,
                tau * tau * tau / 6.0,
                tau * tau * tau * tau / 24.0,
            ];
            for j in 0..5 {
                a[(row, c_of(k, j))] += wgt * phi[j];
            }
        }
        a[(row, w_of(k))] = 1.0;
        rhs[row] = y[k];
        row += 1;
    }
    debug_assert_eq!(row, mc);

    let sol = solve_dense_kkt(hess, a, rhs)?;
    let coeffs: Vec<[f64; 5]> = (0..n)
        .map(|k| {
            [
                sol[c_of(k, 0)],
                sol[c_of(k, 1)],
                sol[c_of(k, 2)],
                sol[c_of(k, 3)],
                sol[c_of(k, 4)],
            ]
        })
        .collect();
    let mut objective = 0.0;
    for k in 0..n {
        let (av, bv, dv) = (sol[v_of(k, 0)], sol[v_of(k, 1)], sol[v_of(k, 2)]);
        for (tau, wgt) in gauss3(grid.step(k)) {
            let v = av + bv * tau + dv * tau * tau / 2.0;
            objective += 0.5 * wgt * v * v;
        }
    }
    for k in 0..n {
        objective += 0.5 * noise.alpha_sq() * sol[w_of(k)] * sol[w_of(k)];
    }
    Ok((QuarticSpline::new(grid.clone(), coeffs)?, objective))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enrichment::{fit_aggregate_spline, fit_snapshot_spline};
    use crate::series::TimeGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn two_point_snapshot_is_a_line_with_zero_objective() {
        let s = SnapshotSeries::new(
            TimeGrid::new(vec![0.0, 2.0]).unwrap(),
            vec![1.0, 5.0],
        )
        .unwrap();
        let (fit, obj) = dense_snapshot_oracle(&s, NoiseRatio::new(7.0).unwrap()).unwrap();
        let c = fit.coeffs()[0];
        assert!((c[0] - 1.0).abs() < 1e-10);
        assert!((c[1] - 2.0).abs() < 1e-10);
        assert!(c[2].abs() < 1e-10);
        assert!(c[3].abs() < 1e-10);
        assert!(obj.abs() < 1e-12);
    }

    #[test]
    fn oracle_matches_specialized_snapshot_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for trial in 0..20 {
            let n = rng.random_range(3..=10);
            let mut t = 0.0;
            let mut knots = vec![0.0];
            for _ in 1..n {
                t += rng.random_range(0.5..1.5);
                knots.push(t);
            }
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = SnapshotSeries::new(TimeGrid::new(knots).unwrap(), values).unwrap();
            for alpha in [0.5, 5.0, 50.0] {
                let noise = NoiseRatio::new(alpha).unwrap();
                let (fast, diag) = fit_snapshot_spline(&s, noise).unwrap();
                let (slow, obj) = dense_snapshot_oracle(&s, noise).unwrap();
                for (cf, cs) in fast.coeffs().iter().zip(slow.coeffs()) {
                    for j in 0..4 {
                        assert!(
                            rel_err(cf[j], cs[j]) < 1e-8,
                            "trial {trial} alpha {alpha} coeff {j}: {} vs {}",
                            cf[j],
                            cs[j]
                        );
                    }
                }
                assert!(
                    rel_err(diag.objective_value, obj) < 1e-8,
                    "objective {} vs {}",
                    diag.objective_value,
                    obj
                );
            }
        }
    }

    #[test]
    fn oracle_matches_specialized_aggregate_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        for trial in 0..20 {
            let n = rng.random_range(2..=8);
            let mut t = 0.0;
            let mut knots = vec![0.0];
            for _ in 0..n {
                t += rng.random_range(0.5..1.5);
                knots.push(t);
            }
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(4.0..9.0)).collect();
            let s = AggregateSeries::new(TimeGrid::new(knots).unwrap(), values).unwrap();
            for alpha in [0.5, 5.0, 50.0] {
                let noise = NoiseRatio::new(alpha).unwrap();
                let (fast, diag) = fit_aggregate_spline(&s, noise).unwrap();
                let (slow, obj) = dense_aggregate_oracle(&s, noise).unwrap();
                for (cf, cs) in fast.coeffs().iter().zip(slow.coeffs()) {
                    for j in 0..5 {
                        assert!(
                            rel_err(cf[j], cs[j]) < 1e-8,
                            "trial {trial} alpha {alpha} coeff {j}: {} vs {}",
                            cf[j],
                            cs[j]
                        );
                    }
                }
                assert!(rel_err(diag.objective_value, obj) < 1e-8);
            }
        }
    }

    /// Perturbing the optimum and re-projecting onto the feasible set must
    /// never lower the objective.
    #[test]
    fn local_optimality_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        for _ in 0..5 {
            let n = rng.random_range(4..=8);
            let knots: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = SnapshotSeries::new(TimeGrid::new(knots).unwrap(), values.clone()).unwrap();
            let noise = NoiseRatio::new(5.0).unwrap();
            let (fit, best) = dense_snapshot_oracle(&s, noise).unwrap();

            for _ in 0..20 {
                // Free parameters of the feasible set: first piece in full,
                // then one jerk value per later piece; continuity fixes the rest.
                let grid = fit.grid();
                let mut first = fit.coeffs()[0];
                for v in first.iter_mut() {
                    *v += rng.random_range(-1e-3..1e-3);
                }
                let mut pieces = vec![first];
                for k in 1..fit.coeffs().len() {
                    let prev = pieces[k - 1];
                    let h = grid.step(k - 1);
                    let c0 = prev[0] + prev[1] * h + prev[2] * h * h / 2.0
                        + prev[3] * h * h * h / 6.0;
                    let c1 = prev[1] + prev[2] * h + prev[3] * h * h / 2.0;
                    let c2 = prev[2] + prev[3] * h;
                    let c3 = fit.coeffs()[k][3] + rng.random_range(-1e-3..1e-3);
                    pieces.push([c0, c1, c2, c3]);
                }
                // True objective of the perturbed feasible spline, quadrature.
                let mut obj = 0.0;
                for (k, c) in pieces.iter().enumerate() {
                    for (tau, wgt) in gauss2(grid.step(k)) {
                        let v = c[2] + c[3] * tau;
                        obj += 0.5 * wgt * v * v;
                    }
                }
                for (k, &t0) in grid.knots().iter().enumerate() {
                    let (piece, tau) = if k < pieces.len() {
                        (pieces[k], 0.0)
                    } else {
                        (pieces[k - 1], grid.step(k - 1))
                    };
                    let x = piece[0]
                        + piece[1] * tau
                        + piece[2] * tau * tau / 2.0
                        + piece[3] * tau * tau * tau / 6.0;
                    let _ = t0;
                    let w = values[k] - x;
                    obj += 0.5 * noise.alpha_sq() * w * w;
                }
                assert!(
                    obj >= best - 1e-10,
                    "perturbed feasible objective {obj} beat the oracle {best}"
                );
            }
        }
    }
}
