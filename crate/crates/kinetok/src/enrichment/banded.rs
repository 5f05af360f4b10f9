//! Banded LU factorization with partial pivoting.
//!
//! The optimality systems assembled by the fit routines are symmetric
//! indefinite with a narrow band (coefficients and constraint multipliers are
//! interleaved per interval), so a dense solve would waste O(n³) work on
//! structural zeros. This is the classic band factorization: storage holds
//! `2*kl + ku + 1` diagonals so row interchanges can fill the extra `kl`
//! superdiagonals, and the factor/solve loops never leave the band.

use crate::error::{Error, Result};

/// General band matrix in banded storage (column-major diagonals).
///
/// Entry (i, j) with `j - ku <= i <= j + kl` lives at row offset
/// `kl + ku + i - j` of column j. The leading `kl` rows of each column are
/// fill-in workspace for pivoting.
#[derive(Debug, Clone)]
pub(crate) struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<f64>,
}

impl BandMatrix {
    /// Assemble from (row, col, value) triplets; duplicate positions sum.
    /// Bandwidths are measured from the triplets themselves.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut kl = 0usize;
        let mut ku = 0usize;
        for &(i, j, _) in triplets {
            if i >= n || j >= n {
                return Err(Error::Shape(format!(
                    "triplet ({i}, {j}) outside {n}x{n} system"
                )));
            }
            if i > j {
                kl = kl.max(i - j);
            } else {
                ku = ku.max(j - i);
            }
        }
        let ldab = 2 * kl + ku + 1;
        let mut ab = vec![0.0; ldab * n];
        for &(i, j, v) in triplets {
            ab[j * ldab + (kl + ku + i - j)] += v;
        }
        Ok(BandMatrix { n, kl, ku, ldab, ab })
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.ab[j * self.ldab + (self.kl + self.ku + i - j)]
    }

    #[inline]
    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.ab[j * self.ldab + (self.kl + self.ku + i - j)]
    }

    /// Factor in place into P·L·U and solve for `rhs`.
    ///
    /// Fails with a numerical error on an exactly zero pivot (structurally
    /// singular system) or a non-finite intermediate. Near-singular systems
    /// that survive factorization are caught by the caller's residual gate.
    pub fn solve(mut self, rhs: &[f64]) -> Result<Vec<f64>> {
        if rhs.len() != self.n {
            return Err(Error::Shape(format!(
                "rhs length {} does not match system size {}",
                rhs.len(),
                self.n
            )));
        }
        let n = self.n;
        let (kl, ku_eff) = (self.kl, self.kl + self.ku);
        let mut ipiv = vec![0usize; n];

        for j in 0..n {
            let km = kl.min(n - 1 - j); // subdiagonal entries in this column
            let mut p = 0usize;
            let mut pmax = self.at(j, j).abs();
            for i in 1..=km {
                let v = self.at(j + i, j).abs();
                if v > pmax {
                    pmax = v;
                    p = i;
                }
            }
            if pmax == 0.0 || !pmax.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "singular band system: zero pivot in column {j}"
                )));
            }
            ipiv[j] = j + p;
            let ju = (j + ku_eff).min(n - 1);
            if p != 0 {
                for c in j..=ju {
                    let a = self.at(j, c);
                    let b = self.at(j + p, c);
                    *self.at_mut(j, c) = b;
                    *self.at_mut(j + p, c) = a;
                }
            }
            let piv = self.at(j, j);
            for i in 1..=km {
                let m = self.at(j + i, j) / piv;
                *self.at_mut(j + i, j) = m; // store multiplier in place
                if m != 0.0 {
                    for c in j + 1..=ju {
                        let u = self.at(j, c);
                        if u != 0.0 {
                            *self.at_mut(j + i, c) -= m * u;
                        }
                    }
                }
            }
        }

        // Forward: apply interchanges and L.
        let mut x = rhs.to_vec();
        for j in 0..n {
            let p = ipiv[j];
            if p != j {
                x.swap(p, j);
            }
            let km = kl.min(n - 1 - j);
            let xj = x[j];
            if xj != 0.0 {
                for i in 1..=km {
                    x[j + i] -= self.at(j + i, j) * xj;
                }
            }
        }
        // Backward: solve U x = y within the (expanded) upper band.
        for j in (0..n).rev() {
            let hi = (j + ku_eff).min(n - 1);
            let mut s = x[j];
            for c in j + 1..=hi {
                s -= self.at(j, c) * x[c];
            }
            x[j] = s / self.at(j, j);
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "non-finite solution component {bad}"
            )));
        }
        Ok(x)
    }
}

/// Infinity-norm residual ||A x - b||_∞ computed from the original triplets,
/// scaled by max(1, ||b||_∞).
pub(crate) fn scaled_residual(
    triplets: &[(usize, usize, f64)],
    x: &[f64],
    b: &[f64],
) -> f64 {
    let mut r: Vec<f64> = b.to_vec();
    for &(i, j, v) in triplets {
        r[i] -= v * x[j];
    }
    let rn = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let bn = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    rn / bn.max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random band system solved both ways must agree.
    #[test]
    fn matches_dense_lu_on_random_band_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..40 {
            let n = rng.random_range(2..30);
            let kl = rng.random_range(0..4.min(n));
            let ku = rng.random_range(0..4.min(n));
            let mut triplets = Vec::new();
            let mut dense = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let in_band = j + kl >= i && i + ku >= j;
                    if in_band {
                        let v: f64 = rng.random_range(-1.0..1.0);
                        // Push the diagonal away from zero so systems stay well-posed.
                        let v = if i == j { v + 4.0 } else { v };
                        triplets.push((i, j, v));
                        dense[(i, j)] = v;
                    }
                }
            }
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let band = BandMatrix::from_triplets(n, &triplets).unwrap();
            let x = band.solve(&b).unwrap();
            let xd = dense
                .clone()
                .lu()
                .solve(&DVector::from_column_slice(&b))
                .unwrap();
            for i in 0..n {
                assert!(
                    (x[i] - xd[i]).abs() < 1e-9,
                    "trial {trial}: component {i} differs: {} vs {}",
                    x[i],
                    xd[i]
                );
            }
            assert!(scaled_residual(&triplets, &x, &b) < 1e-12);
        }
    }

    /// Pivoting must handle a zero leading diagonal (classic KKT layout).
    #[test]
    fn pivots_through_zero_diagonal() {
        // [[0, 1], [1, 1]] x = [1, 3] -> x = [2, 1]
        let triplets = vec![(0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)];
        let band = BandMatrix::from_triplets(2, &triplets).unwrap();
        let x = band.solve(&[1.0, 3.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-14);
        assert!((x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn reports_singularity() {
        // Second column is entirely zero.
        let triplets = vec![(0, 0, 1.0), (1, 0, 1.0)];
        let band = BandMatrix::from_triplets(2, &triplets).unwrap();
        assert!(matches!(
            band.solve(&[1.0, 1.0]),
            Err(Error::NumericalFailure(_))
        ));
    }

    #[test]
    fn duplicate_triplets_accumulate() {
        let triplets = vec![(0, 0, 1.0), (0, 0, 1.0)];
        let band = BandMatrix::from_triplets(1, &triplets).unwrap();
        let x = band.solve(&[4.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-15);
    }
}
