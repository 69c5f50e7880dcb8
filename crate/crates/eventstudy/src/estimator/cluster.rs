//! Cluster-robust sandwich covariance.
//!
//! V = c (X'X)^{-1} [ Σ_g X_g' e_g e_g' X_g ] (X'X)^{-1}
//!
//! with the conventional small-sample factor
//! c = G/(G-1) · (N-1)/(N-K), where G is the number of clusters and K
//! counts retained columns plus absorbed fixed-effect parameters. With every
//! row its own cluster the estimator reduces to the HC1-scaled
//! heteroskedasticity-robust sandwich.

use rayon::prelude::*;

use crate::design::Column;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ClusterVcov {
    pub vcov: Vec<Vec<f64>>,
    pub n_clusters: usize,
    pub small_sample_factor: f64,
    /// Which finite-sample convention produced `small_sample_factor`.
    pub convention: String,
}

/// Compute the clustered covariance of OLS coefficients.
///
/// `x` are the retained (absorbed) regressor columns, `xtx_inverse` their
/// inverse Gram matrix, `absorbed_df` the number of fixed-effect parameters
/// swallowed by the within transformation.
pub fn cluster_vcov(
    x: &[Column],
    residuals: &[f64],
    cluster_ids: &[u32],
    xtx_inverse: &[Vec<f64>],
    absorbed_df: usize,
    small_sample: bool,
) -> Result<ClusterVcov> {
    let n = residuals.len();
    let k = x.len();
    if cluster_ids.len() != n {
        return Err(Error::Validation(format!(
            "{} cluster ids for {n} rows",
            cluster_ids.len()
        )));
    }
    if k == 0 || xtx_inverse.len() != k {
        return Err(Error::Validation("inconsistent regressor inputs".into()));
    }

    let max_id = cluster_ids.iter().copied().max().unwrap_or(0) as usize;
    let mut seen = vec![false; max_id + 1];
    for &g in cluster_ids {
        seen[g as usize] = true;
    }
    let n_clusters = seen.iter().filter(|s| **s).count();
    if n_clusters < 2 {
        return Err(Error::Inference(
            "cluster-robust covariance requires at least two clusters \
             (point estimates are unaffected)"
                .into(),
        ));
    }

    let kk = k + absorbed_df;
    if n <= kk {
        return Err(Error::Inference(format!(
            "degrees of freedom exhausted: {n} rows for {kk} parameters"
        )));
    }

    // Per-column cluster scores s_g[j] = Σ_{i in g} x_ij e_i, accumulated in
    // row order per column so results are thread-count independent.
    let scores: Vec<Vec<f64>> = x
        .par_iter()
        .map(|col| {
            let mut s = vec![0.0f64; max_id + 1];
            for ((&g, &v), &e) in cluster_ids.iter().zip(&col.values).zip(residuals) {
                s[g as usize] += v * e;
            }
            s
        })
        .collect();

    let mut meat = vec![vec![0.0f64; k]; k];
    for i in 0..k {
        for j in i..k {
            let m: f64 = scores[i].iter().zip(&scores[j]).map(|(a, b)| a * b).sum();
            meat[i][j] = m;
            meat[j][i] = m;
        }
    }

    let g = n_clusters as f64;
    let nn = n as f64;
    let (factor, convention) = if small_sample {
        (
            (g / (g - 1.0)) * ((nn - 1.0) / (nn - kk as f64)),
            format!("CR1: G/(G-1) * (N-1)/(N-K) with G={n_clusters}, N={n}, K={kk}"),
        )
    } else {
        (1.0, "no small-sample adjustment".to_string())
    };

    // V = factor * A * meat * A with A = (X'X)^{-1}; symmetrized exactly.
    let mut am = vec![vec![0.0f64; k]; k];
    for i in 0..k {
        for j in 0..k {
            let mut s = 0.0;
            for l in 0..k {
                s += xtx_inverse[i][l] * meat[l][j];
            }
            am[i][j] = s;
        }
    }
    let mut vcov = vec![vec![0.0f64; k]; k];
    for i in 0..k {
        for j in i..k {
            let mut s = 0.0;
            for l in 0..k {
                s += am[i][l] * xtx_inverse[l][j];
            }
            let mut t = 0.0;
            for l in 0..k {
                t += am[j][l] * xtx_inverse[l][i];
            }
            let v = factor * 0.5 * (s + t);
            vcov[i][j] = v;
            vcov[j][i] = v;
        }
    }

    Ok(ClusterVcov {
        vcov,
        n_clusters,
        small_sample_factor: factor,
        convention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::qr::ols;

    fn col(name: &str, values: Vec<f64>) -> Column {
        Column {
            name: name.into(),
            values,
        }
    }

    /// Six rows, two clusters, one regressor: the sandwich expanded by hand.
    #[test]
    fn matches_hand_expanded_sandwich() {
        let xv = vec![1.0, 2.0, -1.0, 0.5, 1.5, -2.0];
        let y = vec![2.1, 3.9, -1.7, 1.2, 3.2, -4.5];
        let clusters = vec![0u32, 0, 0, 1, 1, 1];
        let x = vec![col("x", xv.clone())];
        let fit = ols(&y, &x, 1e-10).unwrap();
        let cv = cluster_vcov(&x, &fit.residuals, &clusters, &fit.xtx_inverse, 0, true).unwrap();

        // Hand expansion: b = Σxy/Σxx; e = y - xb;
        // meat = (Σ_{g0} x e)² + (Σ_{g1} x e)²; V = c * meat / (Σxx)².
        let sxx: f64 = xv.iter().map(|v| v * v).sum();
        let sxy: f64 = xv.iter().zip(&y).map(|(a, b)| a * b).sum();
        let b = sxy / sxx;
        let e: Vec<f64> = y.iter().zip(&xv).map(|(yi, xi)| yi - b * xi).collect();
        let s0: f64 = (0..3).map(|i| xv[i] * e[i]).sum();
        let s1: f64 = (3..6).map(|i| xv[i] * e[i]).sum();
        let c = (2.0 / 1.0) * (5.0 / 5.0);
        let expected = c * (s0 * s0 + s1 * s1) / (sxx * sxx);
        let rel = (cv.vcov[0][0] - expected).abs() / expected.abs();
        assert!(rel <= 1e-12, "rel err {rel}");
        assert_eq!(cv.n_clusters, 2);
    }

    /// Every row its own cluster reduces to the HC1-scaled robust sandwich.
    #[test]
    fn singleton_clusters_equal_hc1() {
        let xv = vec![1.0, 2.0, -1.0, 0.5, 1.5, -2.0, 3.0, 0.25];
        let zv = vec![0.3, -1.0, 0.7, 2.0, -0.5, 1.0, 0.0, -1.5];
        let y = vec![2.0, 4.1, -1.2, 1.0, 3.3, -4.0, 5.9, 0.4];
        let n = y.len();
        let clusters: Vec<u32> = (0..n as u32).collect();
        let x = vec![col("x", xv.clone()), col("z", zv.clone())];
        let fit = ols(&y, &x, 1e-10).unwrap();
        let cv = cluster_vcov(&x, &fit.residuals, &clusters, &fit.xtx_inverse, 0, true).unwrap();

        // HC1: (N/(N-K)) A [Σ x_i x_i' e_i²] A computed independently.
        let k = 2;
        let mut meat = vec![vec![0.0f64; k]; k];
        for i in 0..n {
            let xi = [xv[i], zv[i]];
            let e2 = fit.residuals[i] * fit.residuals[i];
            for a in 0..k {
                for b in 0..k {
                    meat[a][b] += xi[a] * xi[b] * e2;
                }
            }
        }
        let scale = n as f64 / (n as f64 - k as f64);
        let a = &fit.xtx_inverse;
        for i in 0..k {
            for j in 0..k {
                let mut am = [0.0f64; 2];
                for l in 0..k {
                    am[l] = (0..k).map(|m| a[i][m] * meat[m][l]).sum();
                }
                let hc1: f64 = scale * (0..k).map(|l| am[l] * a[l][j]).sum::<f64>();
                let denom = hc1.abs().max(1e-300);
                assert!(
                    (cv.vcov[i][j] - hc1).abs() / denom <= 1e-12,
                    "({i},{j}): {} vs {hc1}",
                    cv.vcov[i][j]
                );
            }
        }
    }

    #[test]
    fn single_cluster_is_an_inference_error() {
        let x = vec![col("x", vec![1.0, 2.0, 3.0])];
        let y = vec![1.0, 2.0, 2.5];
        let fit = ols(&y, &x, 1e-10).unwrap();
        let err =
            cluster_vcov(&x, &fit.residuals, &[5, 5, 5], &fit.xtx_inverse, 0, true).unwrap_err();
        assert!(matches!(err, Error::Inference(_)));
    }

    #[test]
    fn scaling_y_scales_se_not_t() {
        let xv = vec![1.0, 2.0, -1.0, 0.5, 1.5, -2.0, 0.7, 2.2, -0.9];
        let y: Vec<f64> = vec![2.0, 4.0, -1.0, 1.0, 3.0, -4.0, 1.4, 4.6, -2.1];
        let clusters = vec![0u32, 0, 0, 1, 1, 1, 2, 2, 2];
        let x = vec![col("x", xv)];

        let fit1 = ols(&y, &x, 1e-10).unwrap();
        let cv1 = cluster_vcov(&x, &fit1.residuals, &clusters, &fit1.xtx_inverse, 0, true).unwrap();
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let fit2 = ols(&y2, &x, 1e-10).unwrap();
        let cv2 = cluster_vcov(&x, &fit2.residuals, &clusters, &fit2.xtx_inverse, 0, true).unwrap();

        let se1 = cv1.vcov[0][0].sqrt();
        let se2 = cv2.vcov[0][0].sqrt();
        assert!((se2 - 2.0 * se1).abs() <= 1e-10 * se1.abs().max(1.0));
        let t1 = fit1.coefficients[0] / se1;
        let t2 = fit2.coefficients[0] / se2;
        assert!((t1 - t2).abs() <= 1e-10);
    }
}
