//! The numeric core: fixed-effect absorption, rank-revealing least squares
//! and cluster-robust covariance, composed by [`fit`].

mod absorb;
mod cluster;
mod qr;

pub use absorb::{absorb, AbsorptionResult};
pub use cluster::{cluster_vcov, ClusterVcov};
pub use qr::{ols, OlsFit};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::design::{DesignMatrix, FeColumn, ModelSpec};
use crate::error::{Error, Result};

/// Numerical knobs of the estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    /// Absorption tolerance on the largest remaining group mean.
    pub tol: f64,
    /// Maximum alternating-projection sweeps.
    pub max_iter: usize,
    /// Relative pivot threshold below which columns are dropped as rank
    /// deficient.
    pub pivot_rtol: f64,
    /// Apply the G/(G-1) * (N-1)/(N-K) cluster adjustment.
    pub small_sample: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_iter: 10_000,
            pivot_rtol: 1e-10,
            small_sample: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub t_stat: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AbsorptionSummary {
    pub iterations: usize,
    pub max_group_residual: f64,
    pub absorbed_df: usize,
}

/// Named coefficients with cluster-robust covariance and fit diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub coefficients: Vec<Coefficient>,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub adj_r2: f64,
    /// Columns removed for collinearity (absorption and rank drops merged),
    /// reported, never silently zeroed.
    pub dropped_columns: Vec<String>,
    pub convergence: AbsorptionSummary,
    pub cluster_convention: String,
    pub spec: Option<ModelSpec>,
    /// Cluster-robust covariance over retained coefficients, aligned with
    /// `coefficients`. Kept out of the serialized form.
    #[serde(skip)]
    pub vcov: Vec<Vec<f64>>,
    #[serde(skip)]
    name_index: BTreeMap<String, usize>,
}

impl FitResult {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.name_index.get(name).map(|&i| &self.coefficients[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.name_index.get(name).copied()
    }

    /// Covariance submatrix over the named coefficients, in the given order.
    pub fn vcov_of(&self, names: &[String]) -> Result<Vec<Vec<f64>>> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.index_of(n)
                    .ok_or_else(|| Error::Test(format!("coefficient {n:?} not in fit")))
            })
            .collect::<Result<_>>()?;
        Ok(idx
            .iter()
            .map(|&i| idx.iter().map(|&j| self.vcov[i][j]).collect())
            .collect())
    }
}

/// Count the parameters absorbed by the fixed effects: for the first two
/// dimensions, groups(1) + groups(2) minus the number of connected
/// components of their bipartite incidence graph (exact for the two-way
/// case); one further redundancy per additional dimension.
pub fn absorbed_degrees_of_freedom(fe: &[FeColumn]) -> usize {
    match fe.len() {
        0 => 0,
        1 => fe[0].n_groups,
        _ => {
            let off = fe[0].ids.iter().copied().max().unwrap_or(0) as usize + 1;
            let max2 = fe[1].ids.iter().copied().max().unwrap_or(0) as usize;
            let mut uf = UnionFind::new(off + max2 + 1);
            for (&a, &b) in fe[0].ids.iter().zip(&fe[1].ids) {
                uf.union(a as usize, off + b as usize);
            }
            let mut roots = std::collections::BTreeSet::new();
            for &a in &fe[0].ids {
                roots.insert(uf.find(a as usize));
            }
            let components = roots.len();
            let extra: usize = fe[2..].iter().map(|f| f.n_groups.saturating_sub(1)).sum();
            fe[0].n_groups + fe[1].n_groups - components + extra
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Absorb, solve and build the clustered covariance for a design.
pub fn fit(design: &DesignMatrix, opts: &FitOptions) -> Result<FitResult> {
    let n = design.n_rows();
    if n < 2 {
        return Err(Error::Validation("fit requires at least two rows".into()));
    }

    let absorbed = absorb(&design.y, &design.columns, &design.fe, opts.tol, opts.max_iter)?;
    if absorbed.x_res.is_empty() {
        return Err(Error::DegenerateModel(
            "every regressor was absorbed by the fixed effects".into(),
        ));
    }
    let ls = ols(&absorbed.y_res, &absorbed.x_res, opts.pivot_rtol)?;

    let mut dropped = absorbed.dropped_columns.clone();
    dropped.extend(ls.dropped.iter().cloned());
    if !design.treatment_columns.is_empty()
        && !design
            .treatment_columns
            .iter()
            .any(|t| ls.names.contains(t))
    {
        return Err(Error::DegenerateModel(
            "all treatment columns were dropped as collinear".into(),
        ));
    }

    let retained: Vec<_> = absorbed
        .x_res
        .iter()
        .filter(|c| ls.names.contains(&c.name))
        .cloned()
        .collect();
    let absorbed_df = absorbed_degrees_of_freedom(&design.fe);
    let cv = cluster_vcov(
        &retained,
        &ls.residuals,
        &design.cluster_ids,
        &ls.xtx_inverse,
        absorbed_df,
        opts.small_sample,
    )?;

    // Adjusted R² on the original outcome, counting absorbed parameters.
    let p = ls.names.len() + absorbed_df;
    let rss: f64 = ls.residuals.iter().map(|e| e * e).sum();
    let y_mean = design.y.iter().sum::<f64>() / n as f64;
    let tss: f64 = design.y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum();
    let adj_r2 = if n > p && tss > 0.0 {
        1.0 - (rss / (n - p) as f64) / (tss / (n - 1) as f64)
    } else {
        f64::NAN
    };

    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let coefficients: Vec<Coefficient> = ls
        .names
        .iter()
        .zip(&ls.coefficients)
        .enumerate()
        .map(|(j, (name, &estimate))| {
            let se = cv.vcov[j][j].max(0.0).sqrt();
            let t_stat = if se > 0.0 { estimate / se } else { f64::NAN };
            let p_value = if t_stat.is_finite() {
                2.0 * normal.sf(t_stat.abs())
            } else {
                f64::NAN
            };
            Coefficient {
                name: name.clone(),
                estimate,
                se,
                t_stat,
                p_value,
            }
        })
        .collect();

    let name_index = coefficients
        .iter()
        .enumerate()
        .map(|(i, c)| (c.name.clone(), i))
        .collect();

    Ok(FitResult {
        coefficients,
        n_obs: n,
        n_clusters: cv.n_clusters,
        adj_r2,
        dropped_columns: dropped,
        convergence: AbsorptionSummary {
            iterations: absorbed.iterations,
            max_group_residual: absorbed.max_group_residual,
            absorbed_df,
        },
        cluster_convention: cv.convention,
        spec: Some(design.spec.clone()),
        vcov: cv.vcov,
        name_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Column;

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

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    }

    /// Two-way absorbed OLS equals full dummy-variable OLS (Frisch-Waugh-
    /// Lovell), checked here on one instance; the acceptance suite runs 50.
    #[test]
    fn fwl_on_small_two_way_instance() {
        let mut s = 2024u64;
        let n = 200;
        let n_units = 12u32;
        let n_times = 7u32;
        let units: Vec<u32> = (0..n).map(|i| (i as u32 * 7 + 3) % n_units).collect();
        let times: Vec<u32> = (0..n).map(|i| (i as u32 * 13 + 1) % n_times).collect();
        let cols: Vec<Column> = (0..5)
            .map(|j| Column {
                name: format!("x{j}"),
                values: (0..n).map(|_| lcg(&mut s)).collect(),
            })
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                units[i] as f64 * 0.8 - times[i] as f64 * 0.5
                    + cols.iter().enumerate().map(|(j, c)| (j as f64 - 2.0) * c.values[i]).sum::<f64>()
                    + lcg(&mut s)
            })
            .collect();

        let dims = [fe("unit", units.clone()), fe("time", times.clone())];
        let absorbed = absorb(&y, &cols, &dims, 1e-12, 10_000).unwrap();
        let within = ols(&absorbed.y_res, &absorbed.x_res, 1e-10).unwrap();

        // Full dummy regression: all unit dummies plus all-but-one time dummies.
        let mut dummy_cols = cols.clone();
        for u in 0..n_units {
            dummy_cols.push(Column {
                name: format!("u{u}"),
                values: units.iter().map(|&g| if g == u { 1.0 } else { 0.0 }).collect(),
            });
        }
        for t in 1..n_times {
            dummy_cols.push(Column {
                name: format!("t{t}"),
                values: times.iter().map(|&g| if g == t { 1.0 } else { 0.0 }).collect(),
            });
        }
        let full = ols(&y, &dummy_cols, 1e-10).unwrap();
        for (j, name) in within.names.iter().enumerate() {
            let fj = full.names.iter().position(|n| n == name).unwrap();
            let diff = (within.coefficients[j] - full.coefficients[fj]).abs();
            assert!(diff <= 1e-8, "{name}: diff {diff}");
        }
    }

    #[test]
    fn absorbed_df_counts_components() {
        // 3 units and 3 times in one connected component: df = 3 + 3 - 1.
        let units = fe("u", vec![0, 0, 1, 1, 2, 2]);
        let times = fe("t", vec![0, 1, 1, 2, 2, 0]);
        assert_eq!(absorbed_degrees_of_freedom(&[units, times]), 5);

        // Two disconnected blocks: components = 2.
        let units = fe("u", vec![0, 0, 1, 1]);
        let times = fe("t", vec![0, 0, 1, 1]);
        assert_eq!(absorbed_degrees_of_freedom(&[units, times]), 2 + 2 - 2);

        let single = fe("u", vec![0, 1, 1, 2]);
        assert_eq!(absorbed_degrees_of_freedom(&[single]), 3);
    }

    #[test]
    fn vcov_is_symmetric_and_psd() {
        let mut s = 5u64;
        let n = 120;
        let units: Vec<u32> = (0..n).map(|i| (i / 10) as u32).collect();
        let times: Vec<u32> = (0..n).map(|i| (i % 10) as u32).collect();
        let cols: Vec<Column> = (0..4)
            .map(|j| Column {
                name: format!("x{j}"),
                values: (0..n).map(|_| lcg(&mut s)).collect(),
            })
            .collect();
        let y: Vec<f64> = (0..n).map(|_| lcg(&mut s)).collect();
        let design = crate::design::DesignMatrix {
            y_name: "y".into(),
            y,
            columns: cols,
            fe: vec![fe("unit", units.clone()), fe("time", times)],
            cluster_name: "unit".into(),
            cluster_ids: units,
            n_clusters: 12,
            row_keys: (0..n).map(|i| (i as u32, 0, 2000)).collect(),
            treatment_columns: vec![],
            dummy_system: crate::treatment::build_dummies(
                &vec![0; n],
                crate::treatment::DummyMode::Semidynamic,
                -9,
                9,
                &[],
                -2,
            )
            .unwrap(),
            spec: ModelSpec::default(),
            singletons_dropped: 0,
            rows_dropped_missing_y: 0,
        };
        let result = fit(&design, &FitOptions::default()).unwrap();
        let k = result.coefficients.len();
        for i in 0..k {
            for j in 0..k {
                assert!((result.vcov[i][j] - result.vcov[j][i]).abs() <= 1e-12);
            }
        }
        // PSD check via Cholesky with a tiny ridge allowance.
        let mut m = result.vcov.clone();
        for d in m.iter_mut().enumerate() {
            d.1[d.0] += 1e-10;
        }
        assert!(cholesky_ok(&m));
        for c in &result.coefficients {
            assert!((c.se - result.vcov[result.index_of(&c.name).unwrap()][result.index_of(&c.name).unwrap()].sqrt()).abs() <= 1e-14);
        }
    }

    fn cholesky_ok(m: &[Vec<f64>]) -> bool {
        let k = m.len();
        let mut l = vec![vec![0.0f64; k]; k];
        for i in 0..k {
            for j in 0..=i {
                let mut s = m[i][j];
                for p in 0..j {
                    s -= l[i][p] * l[j][p];
                }
                if i == j {
                    if s <= 0.0 {
                        return false;
                    }
                    l[i][j] = s.sqrt();
                } else {
                    l[i][j] = s / l[j][j];
                }
            }
        }
        true
    }
}
