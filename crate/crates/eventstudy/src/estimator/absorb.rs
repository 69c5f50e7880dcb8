//! High-dimensional fixed-effect absorption by alternating projections
//! (iterated group demeaning).
//!
//! Each sweep subtracts group means for every fixed-effect dimension in
//! turn; sweeps repeat until every group mean of every column is within
//! tolerance. A single dimension converges in exactly one sweep. Columns
//! are processed independently, so the computation parallelizes over
//! columns with bit-stable results regardless of thread count.

use rayon::prelude::*;

use crate::design::{Column, FeColumn};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AbsorptionResult {
    pub y_res: Vec<f64>,
    /// Within-transformed columns, minus any column absorbed to zero.
    pub x_res: Vec<Column>,
    /// Sweeps needed by the slowest column.
    pub iterations: usize,
    /// Largest remaining absolute group mean across columns and dimensions.
    pub max_group_residual: f64,
    /// Columns absorbed to (numerical) zero by the fixed effects; they are
    /// collinear with the absorbed effects and carry no information.
    pub dropped_columns: Vec<String>,
}

struct Dimension {
    ids: Vec<u32>,
    counts: Vec<u32>,
}

impl Dimension {
    fn new(fe: &FeColumn) -> Self {
        let max = fe.ids.iter().copied().max().unwrap_or(0) as usize;
        let mut counts = vec![0u32; max + 1];
        for &g in &fe.ids {
            counts[g as usize] += 1;
        }
        Dimension {
            ids: fe.ids.clone(),
            counts,
        }
    }
}

/// Demean one column in place. Returns `(sweeps, final_residual)`; pushes
/// the post-sweep residual into `trace` when provided.
fn demean_column(
    values: &mut [f64],
    dims: &[Dimension],
    tol: f64,
    max_iter: usize,
    mut trace: Option<&mut Vec<f64>>,
) -> (usize, f64) {
    let mut sums: Vec<Vec<f64>> = dims.iter().map(|d| vec![0.0; d.counts.len()]).collect();
    let mut sweeps = 0usize;
    let mut residual = f64::INFINITY;
    while sweeps < max_iter {
        for (dim, sums) in dims.iter().zip(sums.iter_mut()) {
            sums.iter_mut().for_each(|s| *s = 0.0);
            for (i, &g) in dim.ids.iter().enumerate() {
                sums[g as usize] += values[i];
            }
            for (s, &c) in sums.iter_mut().zip(&dim.counts) {
                if c > 0 {
                    *s /= c as f64;
                }
            }
            for (i, &g) in dim.ids.iter().enumerate() {
                values[i] -= sums[g as usize];
            }
        }
        sweeps += 1;

        residual = 0.0;
        for (dim, sums) in dims.iter().zip(sums.iter_mut()) {
            sums.iter_mut().for_each(|s| *s = 0.0);
            for (i, &g) in dim.ids.iter().enumerate() {
                sums[g as usize] += values[i];
            }
            for (s, &c) in sums.iter().zip(&dim.counts) {
                if c > 0 {
                    let m = (s / c as f64).abs();
                    if m > residual {
                        residual = m;
                    }
                }
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(residual);
        }
        if residual <= tol {
            break;
        }
    }
    (sweeps, residual)
}

/// Absorb the fixed effects from the outcome and every regressor column.
pub fn absorb(
    y: &[f64],
    x: &[Column],
    fe: &[FeColumn],
    tol: f64,
    max_iter: usize,
) -> Result<AbsorptionResult> {
    if y.len() < 2 {
        return Err(Error::Validation(
            "absorption requires at least two rows".into(),
        ));
    }
    if fe.is_empty() {
        return Err(Error::Validation(
            "absorption requires at least one fixed-effect dimension".into(),
        ));
    }
    for f in fe {
        if f.ids.len() != y.len() {
            return Err(Error::Validation(format!(
                "fixed-effect dimension {} has {} ids for {} rows",
                f.name,
                f.ids.len(),
                y.len()
            )));
        }
    }
    if max_iter == 0 {
        return Err(Error::Config("max_iter must be positive".into()));
    }
    let dims: Vec<Dimension> = fe.iter().map(Dimension::new).collect();

    let mut y_res = y.to_vec();
    let (y_sweeps, y_resid) = demean_column(&mut y_res, &dims, tol, max_iter, None);

    let results: Vec<(Column, usize, f64, f64)> = x
        .par_iter()
        .map(|col| {
            let orig_scale = col.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let mut values = col.values.clone();
            let (sweeps, resid) = demean_column(&mut values, &dims, tol, max_iter, None);
            (
                Column {
                    name: col.name.clone(),
                    values,
                },
                sweeps,
                resid,
                orig_scale,
            )
        })
        .collect();

    let mut iterations = y_sweeps;
    let mut max_group_residual = y_resid;
    let mut x_res = Vec::with_capacity(x.len());
    let mut dropped = Vec::new();
    for (col, sweeps, resid, orig_scale) in results {
        iterations = iterations.max(sweeps);
        max_group_residual = max_group_residual.max(resid);
        // A column absorbed to numerical zero is collinear with the fixed
        // effects; the threshold scales with the original column magnitude.
        let zero_tol = 10.0 * tol * (1.0 + orig_scale);
        let post_scale = col.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if post_scale <= zero_tol {
            dropped.push(col.name);
        } else {
            x_res.push(col);
        }
    }

    if max_group_residual > tol {
        return Err(Error::NonConvergence {
            iterations,
            max_group_residual,
        });
    }

    Ok(AbsorptionResult {
        y_res,
        x_res,
        iterations,
        max_group_residual,
        dropped_columns: dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fe(name: &str, ids: Vec<u32>) -> FeColumn {
        let n_groups = {
            let mut s = ids.clone();
            s.sort_unstable();
            s.dedup();
            s.len()
        };
        FeColumn {
            name: name.into(),
            ids,
            n_groups,
        }
    }

    fn col(name: &str, values: Vec<f64>) -> Column {
        Column {
            name: name.into(),
            values,
        }
    }

    #[test]
    fn one_dimension_demeans_in_one_sweep() {
        let y = vec![1.0, 2.0, 3.0, 4.0];
        let groups = fe("g", vec![0, 0, 1, 1]);
        let res = absorb(&y, &[], &[groups], 1e-8, 100).unwrap();
        assert_eq!(res.iterations, 1);
        let expected = [-0.5, 0.5, -0.5, 0.5];
        for (a, b) in res.y_res.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_within_groups_column_is_dropped() {
        let y = vec![1.0, 2.0, 3.0, 4.0];
        let groups = fe("g", vec![0, 0, 1, 1]);
        // Constant within each group: fully absorbed.
        let c = col("c", vec![5.0, 5.0, -3.0, -3.0]);
        let keep = col("x", vec![1.0, -1.0, 2.0, 0.5]);
        let res = absorb(&y, &[c, keep], &[groups], 1e-8, 100).unwrap();
        assert_eq!(res.dropped_columns, vec!["c".to_string()]);
        assert_eq!(res.x_res.len(), 1);
        assert_eq!(res.x_res[0].name, "x");
    }

    #[test]
    fn two_way_absorption_zeroes_both_margins() {
        // 3 units x 4 periods with unit and period effects.
        let mut y = Vec::new();
        let mut unit = Vec::new();
        let mut time = Vec::new();
        for u in 0..3u32 {
            for t in 0..4u32 {
                y.push(10.0 * u as f64 + 3.0 * t as f64 + ((u * 7 + t * 3) % 5) as f64);
                unit.push(u);
                time.push(t);
            }
        }
        let res = absorb(
            &y,
            &[],
            &[fe("unit", unit.clone()), fe("time", time.clone())],
            1e-10,
            1000,
        )
        .unwrap();
        for g in 0..3 {
            let m: f64 = res
                .y_res
                .iter()
                .zip(&unit)
                .filter(|(_, &u)| u == g)
                .map(|(v, _)| v)
                .sum::<f64>()
                / 4.0;
            assert!(m.abs() <= 1e-10);
        }
        for p in 0..4 {
            let m: f64 = res
                .y_res
                .iter()
                .zip(&time)
                .filter(|(_, &t)| t == p)
                .map(|(v, _)| v)
                .sum::<f64>()
                / 3.0;
            assert!(m.abs() <= 1e-10);
        }
    }

    #[test]
    fn residual_is_monotone_across_sweeps() {
        // Unbalanced two-way layout to force several sweeps.
        let ids_a: Vec<u32> = vec![0, 0, 0, 1, 1, 2, 2, 2, 3, 3, 3, 3, 4, 4];
        let ids_b: Vec<u32> = vec![0, 1, 2, 0, 3, 1, 3, 4, 0, 2, 4, 5, 1, 5];
        let mut values: Vec<f64> = (0..14)
            .map(|i| ((i * 37 + 11) % 17) as f64 - 8.0 + 0.3 * i as f64)
            .collect();
        let dims = [
            Dimension::new(&fe("a", ids_a)),
            Dimension::new(&fe("b", ids_b)),
        ];
        let mut trace = Vec::new();
        let (_, resid) = demean_column(&mut values, &dims, 1e-12, 500, Some(&mut trace));
        assert!(resid <= 1e-12);
        for w in trace.windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-12) + 1e-15,
                "residual increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn non_convergence_reports_residual() {
        let ids_a: Vec<u32> = vec![0, 0, 1, 1, 2, 2];
        let ids_b: Vec<u32> = vec![0, 1, 1, 2, 2, 0];
        let y = vec![1.0, -2.0, 3.0, 5.0, -4.0, 2.0];
        let err = absorb(&y, &[], &[fe("a", ids_a), fe("b", ids_b)], 1e-12, 1).unwrap_err();
        match err {
            Error::NonConvergence {
                iterations,
                max_group_residual,
            } => {
                assert_eq!(iterations, 1);
                assert!(max_group_residual > 1e-12);
            }
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }
}
