//! Small dense linear-algebra helpers shared by the spectral and spatial solvers.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};

/// Relative pivot size below which an LU factorization is treated as singular.
const PIVOT_RTOL: f64 = 1e-13;

/// Solves the bordered system
///
/// ```text
/// [ M   b ] [x]   [f]
/// [ cᵀ  0 ] [μ] = [g]
/// ```
///
/// used to invert a rank-one-deficient operator on a complement of its kernel.
/// Returns `(x, μ)`.
pub(crate) fn bordered_solve(
    m: &DMatrix<f64>,
    border_col: &DVector<f64>,
    border_row: &DVector<f64>,
    rhs: &DVector<f64>,
    rhs_extra: f64,
) -> Result<(DVector<f64>, f64)> {
    let n = m.nrows();
    debug_assert_eq!(m.ncols(), n);
    let mut big = DMatrix::<f64>::zeros(n + 1, n + 1);
    big.view_mut((0, 0), (n, n)).copy_from(m);
    for i in 0..n {
        big[(i, n)] = border_col[i];
        big[(n, i)] = border_row[i];
    }
    let mut b = DVector::<f64>::zeros(n + 1);
    b.rows_mut(0, n).copy_from(rhs);
    b[n] = rhs_extra;

    let sol = lu_solve(big, &b)?;
    Ok((sol.rows(0, n).into_owned(), sol[n]))
}

/// LU factorization that reports near-singular pivots instead of returning
/// garbage.
pub(crate) fn checked_lu(a: DMatrix<f64>) -> Result<LU<f64, Dyn, Dyn>> {
    let lu = a.lu();
    let u = lu.u();
    let diag = u.diagonal();
    let max = diag.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let min = diag.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    if max == 0.0 || min <= PIVOT_RTOL * max {
        return Err(Error::Singular(format!(
            "pivot ratio {:.3e} below {PIVOT_RTOL:e}",
            if max == 0.0 { 0.0 } else { min / max }
        )));
    }
    Ok(lu)
}

pub(crate) fn lu_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    checked_lu(a)?
        .solve(b)
        .ok_or_else(|| Error::Singular("LU solve failed".into()))
}

/// Matrix exponential of a conservative rate matrix times `dt`, with each
/// column re-closed so it sums to one.
pub(crate) fn stochastic_exp(rates: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let mut p = (rates * dt).exp();
    let n = p.nrows();
    for j in 0..n {
        for i in 0..n {
            if i != j && p[(i, j)] < 0.0 {
                p[(i, j)] = 0.0;
            }
        }
        let off: f64 = (0..n).filter(|&i| i != j).map(|i| p[(i, j)]).sum();
        p[(j, j)] = 1.0 - off;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bordered_solve_recovers_normalized_kernel() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 1.0, -2.0]);
        let ones = DVector::from_element(2, 1.0);
        let (x, mu) = bordered_solve(&a, &ones, &ones, &DVector::zeros(2), 1.0).unwrap();
        assert!((x[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((x[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(mu.abs() < 1e-15);
    }

    #[test]
    fn singular_system_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DVector::from_element(2, 1.0);
        assert!(matches!(lu_solve(a, &b), Err(Error::Singular(_))));
    }

    #[test]
    fn stochastic_exp_columns_sum_to_one() {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[-3.0, 0.5, 0.0, 1.0, -0.5, 2.0, 2.0, 0.0, -2.0],
        );
        let p = stochastic_exp(&a, 0.37);
        for j in 0..3 {
            let s: f64 = p.column(j).sum();
            assert!((s - 1.0).abs() < 1e-15);
            assert!(p.column(j).iter().all(|&v| v >= 0.0));
        }
    }
}
