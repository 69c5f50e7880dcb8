//! Hypothesis tests and diagnostic suites: the joint pre-trend test,
//! placebo estimation on the outer ring, and composition balance
//! regressions.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor};

use crate::design::{balance_design, build_design, Mode, ModelSpec};
use crate::error::{Error, Result};
use crate::estimator::{fit, Coefficient, FitOptions, FitResult};
use crate::geo::EventMap;
use crate::panel::Panel;
use crate::report::{coefficient_plot, PlotPoint};
use crate::treatment::dummy_column_name;

/// Joint test that a coefficient subset is zero: `W = b' V^{-1} b`.
///
/// `p_value` is the asymptotic chi-square upper tail with `df` restrictions.
/// `p_value_small_sample` rescales the statistic by `(G-q)/(q(G-1))` and
/// refers it to `F(q, G-q)`, which is exact for Hotelling-type statistics
/// when cluster scores are i.i.d. normal; with many clusters the two agree,
/// with few clusters the chi-square form badly over-rejects.
#[derive(Debug, Clone, Serialize)]
pub struct WaldTest {
    pub restricted_names: Vec<String>,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub p_value_small_sample: Option<f64>,
    pub n_clusters: usize,
}

#[allow(clippy::needless_range_loop)]
fn cholesky_solve(matrix: &[Vec<f64>], rhs: &[f64]) -> Option<Vec<f64>> {
    let k = matrix.len();
    let mut l = vec![vec![0.0f64; k]; k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = matrix[i][j];
            for p in 0..j {
                s -= l[i][p] * l[j][p];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = vec![0.0f64; k];
    for i in 0..k {
        let mut s = rhs[i];
        for p in 0..i {
            s -= l[i][p] * y[p];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![0.0f64; k];
    for i in (0..k).rev() {
        let mut s = y[i];
        for p in i + 1..k {
            s -= l[p][i] * x[p];
        }
        x[i] = s / l[i][i];
    }
    Some(x)
}

/// Wald test that the named lead coefficients are jointly zero.
pub fn pretrend_test(fit_result: &FitResult, lead_names: &[String]) -> Result<WaldTest> {
    if lead_names.is_empty() {
        return Err(Error::Test("no lead coefficients named".into()));
    }
    let estimates: Vec<f64> = lead_names
        .iter()
        .map(|n| {
            fit_result
                .coefficient(n)
                .map(|c| c.estimate)
                .ok_or_else(|| Error::Test(format!("coefficient {n:?} not in fit")))
        })
        .collect::<Result<_>>()?;
    let vcov = fit_result.vcov_of(lead_names)?;

    let statistic = if estimates.iter().all(|b| *b == 0.0) {
        0.0
    } else {
        let solved = cholesky_solve(&vcov, &estimates).ok_or_else(|| {
            Error::Test(
                "singular covariance over the lead subset; \
                 test fewer leads or use more clusters"
                    .into(),
            )
        })?;
        estimates.iter().zip(&solved).map(|(b, x)| b * x).sum()
    };

    let q = lead_names.len();
    let p_value = ChiSquared::new(q as f64)
        .map_err(|e| Error::Test(format!("chi-square df {q}: {e}")))?
        .sf(statistic);
    let g = fit_result.n_clusters;
    let p_value_small_sample = if g > q + 1 {
        let scale = (g - q) as f64 / (q as f64 * (g - 1) as f64);
        let f = FisherSnedecor::new(q as f64, (g - q) as f64)
            .map_err(|e| Error::Test(format!("F({q}, {}): {e}", g - q)))?;
        Some(f.sf(statistic * scale))
    } else {
        None
    };

    Ok(WaldTest {
        restricted_names: lead_names.to_vec(),
        statistic,
        df: q,
        p_value,
        p_value_small_sample,
        n_clusters: g,
    })
}

/// Names of the lead coefficients whose absence of pre-trends identifies
/// the design: included pretrend categories strictly before the
/// anticipation horizon.
pub fn pretrend_lead_names(spec: &ModelSpec) -> Vec<String> {
    (spec.k_min..spec.baseline_below)
        .filter(|k| !spec.omitted_leads.contains(k))
        .map(dummy_column_name)
        .collect()
}

/// Relative times shown in the pre-trend coefficient plot: every included
/// lead up to and including the anticipation boundary.
pub fn pretrend_plot_ks(spec: &ModelSpec) -> Vec<i32> {
    (spec.k_min..=spec.baseline_below)
        .filter(|k| !spec.omitted_leads.contains(k))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrendReport {
    pub wald: WaldTest,
    pub coefficients: Vec<PlotPoint>,
    pub fit: FitResult,
}

/// Estimate the pretrend specification and jointly test the leads.
pub fn pretrend_suite(
    panel: &Panel,
    event_map: &EventMap,
    spec: &ModelSpec,
    opts: &FitOptions,
) -> Result<PretrendReport> {
    let spec = spec.clone().with_mode(Mode::Pretrend);
    let design = build_design(panel, event_map, &spec)?;
    let fit_result = fit(&design, opts)?;
    // Leads dropped as collinear (empty cells) cannot be tested; restrict
    // the joint test to those actually estimated.
    let leads: Vec<String> = pretrend_lead_names(&spec)
        .into_iter()
        .filter(|n| fit_result.coefficient(n).is_some())
        .collect();
    if leads.is_empty() {
        return Err(Error::Test("no estimable lead coefficients".into()));
    }
    let wald = pretrend_test(&fit_result, &leads)?;
    let coefficients = coefficient_plot(&fit_result, &pretrend_plot_ks(&spec), spec.confidence_level);
    Ok(PretrendReport {
        wald,
        coefficients,
        fit: fit_result,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PlaceboReport {
    pub warnings: Vec<String>,
    pub coefficients: Vec<PlotPoint>,
    pub fit: FitResult,
}

/// Re-estimate the semidynamic specification on the outer-ring sample,
/// where the design predicts no effect.
pub fn placebo_run(
    panel: &Panel,
    event_map: &EventMap,
    spec: &ModelSpec,
    opts: &FitOptions,
) -> Result<PlaceboReport> {
    let ring = event_map.ring_municipalities();
    if ring.is_empty() {
        return Err(Error::Sample(
            "event map has no municipalities in the placebo ring".into(),
        ));
    }
    let mut warnings = Vec::new();
    let mut analysis = event_map.analysis_municipalities();
    let mut ring_sorted = ring.clone();
    analysis.sort_unstable();
    ring_sorted.sort_unstable();
    if analysis == ring_sorted {
        warnings.push(
            "placebo ring sample is identical to the analysis sample; \
             check the buffer radii"
                .to_string(),
        );
    }

    let spec = spec.clone().with_mode(Mode::Placebo);
    let design = build_design(panel, event_map, &spec)?;
    let treated_rows = design
        .dummy_system
        .k_per_row
        .iter()
        .filter(|&&k| k >= spec.baseline_below)
        .count();
    if treated_rows == 0 {
        return Err(Error::Sample(
            "placebo sample has no rows at or after the anticipation horizon".into(),
        ));
    }
    let fit_result = fit(&design, opts)?;
    let ks: Vec<i32> = design.dummy_system.included.clone();
    let coefficients = coefficient_plot(&fit_result, &ks, spec.confidence_level);
    Ok(PlaceboReport {
        warnings,
        coefficients,
        fit: fit_result,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BalanceFit {
    pub covariate: String,
    /// Baseline-adjusted grand mean of the covariate, in its own units.
    pub intercept: Coefficient,
    pub fit: FitResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct BalanceEntry {
    pub covariate: String,
    pub outcome: std::result::Result<BalanceFit, String>,
}

/// One event-dummies-plus-fixed-effects regression per observable
/// characteristic. Per-covariate failures are collected, not fatal to
/// siblings.
pub fn balance_suite(
    panel: &Panel,
    event_map: &EventMap,
    spec: &ModelSpec,
    covariates: &[String],
    opts: &FitOptions,
) -> Result<Vec<BalanceEntry>> {
    if covariates.is_empty() {
        return Err(Error::Spec("no balance covariates named".into()));
    }
    Ok(covariates
        .iter()
        .map(|cov| BalanceEntry {
            covariate: cov.clone(),
            outcome: balance_one(panel, event_map, spec, cov, opts).map_err(|e| e.to_string()),
        })
        .collect())
}

fn balance_one(
    panel: &Panel,
    event_map: &EventMap,
    spec: &ModelSpec,
    covariate: &str,
    opts: &FitOptions,
) -> Result<BalanceFit> {
    let design = balance_design(panel, event_map, spec, covariate)?;
    let mean = design.y.iter().sum::<f64>() / design.n_rows() as f64;
    let var = design
        .y
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / design.n_rows() as f64;
    if var <= 0.0 {
        return Err(Error::DegenerateModel(format!(
            "covariate {covariate} is constant in the sample"
        )));
    }
    let fit_result = fit(&design, opts)?;

    // Recovered intercept: grand mean net of the estimated event effects at
    // their sample shares. Its variance takes the coefficient uncertainty
    // (the dominant term) through the delta method.
    let shares: Vec<f64> = fit_result
        .coefficients
        .iter()
        .map(|c| {
            let col = design.column(&c.name).expect("retained column exists");
            col.values.iter().sum::<f64>() / design.n_rows() as f64
        })
        .collect();
    let adjusted: f64 = mean
        - fit_result
            .coefficients
            .iter()
            .zip(&shares)
            .map(|(c, s)| c.estimate * s)
            .sum::<f64>();
    let mut var_i = 0.0;
    for (i, si) in shares.iter().enumerate() {
        for (j, sj) in shares.iter().enumerate() {
            var_i += si * sj * fit_result.vcov[i][j];
        }
    }
    let se = var_i.max(0.0).sqrt();
    let t = if se > 0.0 { adjusted / se } else { f64::NAN };
    let normal = statrs::distribution::Normal::new(0.0, 1.0).expect("standard normal");
    let p = if t.is_finite() { 2.0 * normal.sf(t.abs()) } else { f64::NAN };
    Ok(BalanceFit {
        covariate: covariate.to_string(),
        intercept: Coefficient {
            name: "Intercept".into(),
            estimate: adjusted,
            se,
            t_stat: t,
            p_value: p,
        },
        fit: fit_result,
    })
}

/// Outcome of one diagnostic suite, kept serializable even on failure.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Suite<T> {
    Ok { report: T },
    Error { message: String },
}

impl<T> Suite<T> {
    pub fn from_result(r: Result<T>) -> Self {
        match r {
            Ok(report) => Suite::Ok { report },
            Err(e) => Suite::Error {
                message: e.to_string(),
            },
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, Suite::Ok { .. })
    }

    pub fn as_ok(&self) -> Option<&T> {
        match self {
            Suite::Ok { report } => Some(report),
            Suite::Error { .. } => None,
        }
    }
}

/// The full diagnostic battery, each suite tagged with the spec that
/// produced it.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub spec: ModelSpec,
    pub pretrend: Suite<PretrendReport>,
    pub placebo: Suite<PlaceboReport>,
    pub balance: Suite<Vec<BalanceEntry>>,
    pub singletons_dropped: usize,
}

impl DiagnosticsReport {
    pub fn any_suite_succeeded(&self) -> bool {
        self.pretrend.is_ok() || self.placebo.is_ok() || self.balance.is_ok()
    }
}

/// Run `reps` independent replications in parallel, each seeded
/// deterministically from the base seed and its index.
pub fn monte_carlo<T: Send>(
    reps: usize,
    base_seed: u64,
    run: impl Fn(u64) -> T + Sync,
) -> Vec<T> {
    use rayon::prelude::*;
    (0..reps)
        .into_par_iter()
        .map(|i| {
            let mut z = base_seed
                .wrapping_add((i as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15));
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            run(z ^ (z >> 31))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Column;
    use crate::design::FeColumn;
    use crate::estimator::{absorb, cluster_vcov, ols};

    fn toy_fit(estimates: &[f64], vcov: Vec<Vec<f64>>, n_clusters: usize) -> FitResult {
        // Assemble a FitResult by running a tiny regression, then overwrite
        // the pieces under test.
        let n = 24;
        let ids: Vec<u32> = (0..n as u32).map(|i| i % 4).collect();
        let cols: Vec<Column> = (0..estimates.len())
            .map(|j| Column {
                name: format!("lead{j}"),
                values: (0..n).map(|i| ((i * (j + 2) + 1) % 7) as f64 - 3.0).collect(),
            })
            .collect();
        let y: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let fe = vec![FeColumn {
            name: "g".into(),
            ids: ids.clone(),
            n_groups: 4,
        }];
        let absorbed = absorb(&y, &cols, &fe, 1e-10, 100).unwrap();
        let ls = ols(&absorbed.y_res, &absorbed.x_res, 1e-10).unwrap();
        let cv = cluster_vcov(&absorbed.x_res, &ls.residuals, &ids, &ls.xtx_inverse, 4, true)
            .unwrap();
        let design = crate::design::DesignMatrix {
            y_name: "y".into(),
            y,
            columns: cols,
            fe,
            cluster_name: "g".into(),
            cluster_ids: ids,
            n_clusters: 4,
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
        let mut fit_result = fit(&design, &FitOptions::default()).unwrap();
        let _ = cv;
        for (c, &e) in fit_result.coefficients.iter_mut().zip(estimates) {
            c.estimate = e;
        }
        fit_result.vcov = vcov;
        fit_result.n_clusters = n_clusters;
        fit_result
    }

    #[test]
    fn zero_leads_give_zero_statistic_and_unit_p() {
        let fit_result = toy_fit(&[0.0, 0.0], vec![vec![1.0, 0.2], vec![0.2, 1.0]], 50);
        let names = vec!["lead0".to_string(), "lead1".to_string()];
        let w = pretrend_test(&fit_result, &names).unwrap();
        assert_eq!(w.statistic, 0.0);
        assert_eq!(w.df, 2);
        assert!((w.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_lead_at_1_96_sigma_has_p_close_to_5_percent() {
        let fit_result = toy_fit(&[1.96], vec![vec![1.0]], 200);
        let w = pretrend_test(&fit_result, &["lead0".to_string()]).unwrap();
        assert!((w.statistic - 3.8416).abs() < 1e-10);
        assert!((w.p_value - 0.05).abs() <= 0.0005, "p = {}", w.p_value);
    }

    #[test]
    fn wald_is_invariant_to_lead_order() {
        let v = vec![
            vec![1.0, 0.3, 0.1],
            vec![0.3, 2.0, -0.2],
            vec![0.1, -0.2, 1.5],
        ];
        let fit_result = toy_fit(&[0.5, -0.8, 0.2], v.clone(), 40);
        let a = pretrend_test(
            &fit_result,
            &["lead0".into(), "lead1".into(), "lead2".into()],
        )
        .unwrap();
        let b = pretrend_test(
            &fit_result,
            &["lead2".into(), "lead0".into(), "lead1".into()],
        )
        .unwrap();
        assert!((a.statistic - b.statistic).abs() <= 1e-10);
    }

    #[test]
    fn wald_is_invariant_to_outcome_rescaling() {
        let v = vec![vec![0.04, 0.01], vec![0.01, 0.09]];
        let b = [0.3, -0.5];
        let fit1 = toy_fit(&b, v.clone(), 40);
        let c = 3.7;
        let scaled: Vec<Vec<f64>> = v
            .iter()
            .map(|row| row.iter().map(|x| x * c * c).collect())
            .collect();
        let fit2 = toy_fit(&[b[0] * c, b[1] * c], scaled, 40);
        let names = vec!["lead0".to_string(), "lead1".to_string()];
        let w1 = pretrend_test(&fit1, &names).unwrap();
        let w2 = pretrend_test(&fit2, &names).unwrap();
        assert!((w1.statistic - w2.statistic).abs() <= 1e-9);
    }

    #[test]
    fn singular_subvcov_is_a_test_error() {
        let v = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let fit_result = toy_fit(&[0.5, 0.5], v, 40);
        let err = pretrend_test(&fit_result, &["lead0".into(), "lead1".into()]).unwrap_err();
        assert!(matches!(err, Error::Test(_)));
    }

    #[test]
    fn missing_lead_is_a_test_error() {
        let fit_result = toy_fit(&[0.5], vec![vec![1.0]], 40);
        assert!(pretrend_test(&fit_result, &["nope".into()]).is_err());
    }

    #[test]
    fn lead_names_follow_the_spec_window() {
        let spec = ModelSpec::default();
        let names = pretrend_lead_names(&spec);
        assert_eq!(
            names,
            vec!["ev_m8", "ev_m7", "ev_m6", "ev_m5", "ev_m4"]
                .into_iter()
                .map(String::from)
                .collect::<Vec<_>>()
        );
        assert_eq!(pretrend_plot_ks(&spec), vec![-8, -7, -6, -5, -4, -2]);
    }

    #[test]
    fn monte_carlo_is_deterministic_and_indexed() {
        let a = monte_carlo(8, 7, |seed| seed);
        let b = monte_carlo(8, 7, |seed| seed);
        assert_eq!(a, b);
        let mut uniq = a.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 8);
    }
}
