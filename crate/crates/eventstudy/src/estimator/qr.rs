//! Least squares via Householder QR with column pivoting.
//!
//! Pivoting makes the decomposition rank-revealing: at each step the
//! remaining column with the largest partial norm is eliminated next, so
//! numerically dependent columns sink to the end and are dropped once the
//! pivot magnitude falls below `pivot_rtol` relative to the first pivot.
//! Dropped columns are reported by name, never silently zeroed.

// Triangular solves read clearer with explicit indices.
#![allow(clippy::needless_range_loop)]

use rayon::prelude::*;

use crate::design::Column;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct OlsFit {
    /// Retained column names, in original column order.
    pub names: Vec<String>,
    /// Estimates aligned with `names`.
    pub coefficients: Vec<f64>,
    /// Columns dropped for rank deficiency, in original column order.
    pub dropped: Vec<String>,
    /// (X'X)^{-1} over the retained columns, aligned with `names`.
    pub xtx_inverse: Vec<Vec<f64>>,
    /// y - X b over the retained columns.
    pub residuals: Vec<f64>,
}

/// Solve min ||y - X b|| by column-pivoted Householder QR.
pub fn ols(y: &[f64], x: &[Column], pivot_rtol: f64) -> Result<OlsFit> {
    let n = y.len();
    let k = x.len();
    if k == 0 {
        return Err(Error::DegenerateModel("zero regressor columns".into()));
    }
    if n == 0 {
        return Err(Error::Validation("empty outcome".into()));
    }
    for c in x {
        if c.values.len() != n {
            return Err(Error::Validation(format!(
                "column {} has {} rows, expected {n}",
                c.name,
                c.values.len()
            )));
        }
    }

    let mut a: Vec<Vec<f64>> = x.iter().map(|c| c.values.clone()).collect();
    let mut qty = y.to_vec();
    let mut piv: Vec<usize> = (0..k).collect();

    let steps = k.min(n);
    let mut rank = steps;
    let mut r00 = 0.0f64;
    for j in 0..steps {
        // Partial norms of the trailing columns over rows j.. — recomputed
        // exactly each step (cheap relative to the reflector application,
        // and immune to downdating cancellation).
        let norms: Vec<f64> = a[j..]
            .par_iter()
            .map(|col| col[j..].iter().map(|v| v * v).sum::<f64>())
            .collect();
        let mut best = 0usize;
        for c in 1..norms.len() {
            let better = norms[c] > norms[best]
                || (norms[c] == norms[best] && piv[j + c] < piv[j + best]);
            if better {
                best = c;
            }
        }
        let pivot_mag = norms[best].sqrt();
        if j == 0 {
            r00 = pivot_mag;
            if r00 == 0.0 {
                rank = 0;
                break;
            }
        }
        if pivot_mag < pivot_rtol * r00 {
            rank = j;
            break;
        }
        a.swap(j, j + best);
        piv.swap(j, j + best);

        // Householder reflector for column j, rows j..: v = x + sign(x0)|x| e1.
        let mut v: Vec<f64> = a[j][j..].to_vec();
        let alpha = if v[0] >= 0.0 { -pivot_mag } else { pivot_mag };
        v[0] -= alpha;
        let vnorm_sq: f64 = v.iter().map(|w| w * w).sum();
        if vnorm_sq > 0.0 {
            let beta = 2.0 / vnorm_sq;
            let (_, trailing) = a.split_at_mut(j + 1);
            trailing.par_iter_mut().for_each(|col| {
                let dot: f64 = v.iter().zip(&col[j..]).map(|(vi, ci)| vi * ci).sum();
                let s = beta * dot;
                for (vi, ci) in v.iter().zip(col[j..].iter_mut()) {
                    *ci -= s * vi;
                }
            });
            let dot: f64 = v.iter().zip(&qty[j..]).map(|(vi, ci)| vi * ci).sum();
            let s = beta * dot;
            for (vi, ci) in v.iter().zip(qty[j..].iter_mut()) {
                *ci -= s * vi;
            }
        }
        a[j][j] = alpha;
        for r in j + 1..n {
            a[j][r] = 0.0;
        }
    }

    if rank == 0 {
        return Err(Error::DegenerateModel(
            "no retained columns: all regressors are numerically zero".into(),
        ));
    }

    // Back-substitution on the leading rank x rank block: R z = Q'y.
    let r = |row: usize, col: usize| a[col][row];
    let mut z = vec![0.0f64; rank];
    for row in (0..rank).rev() {
        let mut s = qty[row];
        for col in row + 1..rank {
            s -= r(row, col) * z[col];
        }
        z[row] = s / r(row, row);
    }

    // R^{-1} by back-substitution per unit column, then (X'X)^{-1} = R^{-1} R^{-T}.
    let mut rinv = vec![vec![0.0f64; rank]; rank];
    for unit in 0..rank {
        for row in (0..=unit).rev() {
            let mut s = if row == unit { 1.0 } else { 0.0 };
            for col in row + 1..=unit {
                s -= r(row, col) * rinv[col][unit];
            }
            rinv[row][unit] = s / r(row, row);
        }
    }
    let mut xtx_inv_piv = vec![vec![0.0f64; rank]; rank];
    for i in 0..rank {
        for j in i..rank {
            let mut s = 0.0;
            for l in j..rank {
                s += rinv[i][l] * rinv[j][l];
            }
            xtx_inv_piv[i][j] = s;
            xtx_inv_piv[j][i] = s;
        }
    }

    // Report retained and dropped in original column order.
    let mut retained: Vec<(usize, usize)> = piv[..rank]
        .iter()
        .copied()
        .enumerate()
        .map(|(pos, orig)| (orig, pos))
        .collect();
    retained.sort_unstable_by_key(|(orig, _)| *orig);
    let names: Vec<String> = retained.iter().map(|(orig, _)| x[*orig].name.clone()).collect();
    let coefficients: Vec<f64> = retained.iter().map(|(_, pos)| z[*pos]).collect();
    let mut dropped_idx: Vec<usize> = piv[rank..].to_vec();
    dropped_idx.sort_unstable();
    let dropped: Vec<String> = dropped_idx.iter().map(|&i| x[i].name.clone()).collect();

    let mut xtx_inverse = vec![vec![0.0f64; rank]; rank];
    for (i, (_, pi)) in retained.iter().enumerate() {
        for (j, (_, pj)) in retained.iter().enumerate() {
            xtx_inverse[i][j] = xtx_inv_piv[*pi][*pj];
        }
    }

    let mut residuals = y.to_vec();
    for ((orig, _), coef) in retained.iter().zip(&coefficients) {
        let col = &x[*orig].values;
        for (e, v) in residuals.iter_mut().zip(col) {
            *e -= coef * v;
        }
    }

    Ok(OlsFit {
        names,
        coefficients,
        dropped,
        xtx_inverse,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(name: &str, values: Vec<f64>) -> Column {
        Column {
            name: name.into(),
            values,
        }
    }

    /// Normal-equations oracle: solve (X'X) b = X'y by Gaussian elimination
    /// with partial pivoting. Independent of the QR implementation path.
    fn normal_equations(y: &[f64], x: &[Column]) -> Vec<f64> {
        let k = x.len();
        let mut m = vec![vec![0.0f64; k + 1]; k];
        for i in 0..k {
            for j in 0..k {
                m[i][j] = x[i].values.iter().zip(&x[j].values).map(|(a, b)| a * b).sum();
            }
            m[i][k] = x[i].values.iter().zip(y).map(|(a, b)| a * b).sum();
        }
        for p in 0..k {
            let mut best = p;
            for r in p + 1..k {
                if m[r][p].abs() > m[best][p].abs() {
                    best = r;
                }
            }
            m.swap(p, best);
            for r in 0..k {
                if r != p {
                    let f = m[r][p] / m[p][p];
                    for c in p..=k {
                        m[r][c] -= f * m[p][c];
                    }
                }
            }
        }
        (0..k).map(|i| m[i][k] / m[i][i]).collect()
    }

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    }

    #[test]
    fn exact_fit_recovers_coefficients() {
        let mut s = 7u64;
        let n = 60;
        let cols: Vec<Column> = (0..4)
            .map(|j| col(&format!("x{j}"), (0..n).map(|_| lcg(&mut s)).collect()))
            .collect();
        let b = [2.0, -1.5, 0.25, 3.0];
        let y: Vec<f64> = (0..n)
            .map(|i| cols.iter().zip(b).map(|(c, w)| w * c.values[i]).sum())
            .collect();
        let fit = ols(&y, &cols, 1e-10).unwrap();
        assert!(fit.dropped.is_empty());
        for (est, truth) in fit.coefficients.iter().zip(b) {
            assert!((est - truth).abs() <= 1e-10, "{est} vs {truth}");
        }
        assert!(fit.residuals.iter().all(|e| e.abs() < 1e-9));
    }

    #[test]
    fn duplicated_column_is_dropped_by_name() {
        let mut s = 99u64;
        let n = 40;
        let base: Vec<f64> = (0..n).map(|_| lcg(&mut s)).collect();
        let other: Vec<f64> = (0..n).map(|_| lcg(&mut s)).collect();
        let y: Vec<f64> = base.iter().zip(&other).map(|(a, b)| a + 2.0 * b).collect();
        let cols = vec![
            col("first", base.clone()),
            col("twin", base),
            col("other", other),
        ];
        let fit = ols(&y, &cols, 1e-10).unwrap();
        assert_eq!(fit.dropped, vec!["twin".to_string()]);
        assert_eq!(fit.names, vec!["first".to_string(), "other".to_string()]);
    }

    #[test]
    fn matches_normal_equations_on_random_system() {
        let mut s = 1234u64;
        let n = 500;
        let k = 8;
        let cols: Vec<Column> = (0..k)
            .map(|j| col(&format!("x{j}"), (0..n).map(|_| lcg(&mut s)).collect()))
            .collect();
        let y: Vec<f64> = (0..n).map(|_| lcg(&mut s)).collect();
        let fit = ols(&y, &cols, 1e-10).unwrap();
        let oracle = normal_equations(&y, &cols);
        for (a, b) in fit.coefficients.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn xtx_inverse_matches_direct_inverse_on_small_system() {
        let cols = vec![
            col("a", vec![1.0, 2.0, 0.0, -1.0, 3.0]),
            col("b", vec![0.5, -1.0, 2.0, 1.0, 0.0]),
        ];
        let y = vec![1.0, 0.0, 2.0, -1.0, 0.5];
        let fit = ols(&y, &cols, 1e-10).unwrap();
        // 2x2 closed form.
        let saa: f64 = cols[0].values.iter().map(|v| v * v).sum();
        let sbb: f64 = cols[1].values.iter().map(|v| v * v).sum();
        let sab: f64 = cols[0].values.iter().zip(&cols[1].values).map(|(a, b)| a * b).sum();
        let det = saa * sbb - sab * sab;
        let expect = [[sbb / det, -sab / det], [-sab / det, saa / det]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((fit.xtx_inverse[i][j] - expect[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_zero_columns_are_degenerate() {
        let cols = vec![col("z", vec![0.0; 10])];
        let y = vec![1.0; 10];
        assert!(matches!(
            ols(&y, &cols, 1e-10),
            Err(Error::DegenerateModel(_))
        ));
    }
}
