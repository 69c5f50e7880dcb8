//! Output emitters: coefficient tables, treatment-distribution tables and
//! coefficient-plot data.

use std::io::Write;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::Result;
use crate::estimator::FitResult;
use crate::treatment::{display_k, dummy_column_name, parse_dummy_column_name, TreatmentDistribution};

/// One point of a coefficient plot: estimate with confidence band.
#[derive(Debug, Clone, Serialize)]
pub struct PlotPoint {
    pub k: i32,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Two-sided normal critical value for a confidence level. The 95% value is
/// pinned to the conventional 1.96.
pub fn z_critical(confidence_level: f64) -> f64 {
    if (confidence_level - 0.95).abs() < 1e-12 {
        1.96
    } else {
        Normal::new(0.0, 1.0)
            .expect("standard normal")
            .inverse_cdf(0.5 + confidence_level / 2.0)
    }
}

/// Extract `(k, estimate, ci)` rows for the event-time dummies with `k` in
/// `ks`, skipping coefficients that were dropped as collinear.
pub fn coefficient_plot(fit: &FitResult, ks: &[i32], confidence_level: f64) -> Vec<PlotPoint> {
    let z = z_critical(confidence_level);
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.iter()
        .filter_map(|&k| {
            fit.coefficient(&dummy_column_name(k)).map(|c| PlotPoint {
                k,
                estimate: c.estimate,
                ci_low: c.estimate - z * c.se,
                ci_high: c.estimate + z * c.se,
            })
        })
        .collect()
}

/// Write plot rows as `k,estimate,ci_low,ci_high`.
pub fn write_plot_csv<W: Write>(writer: &mut W, points: &[PlotPoint]) -> Result<()> {
    writeln!(writer, "k,estimate,ci_low,ci_high")?;
    for p in points {
        writeln!(writer, "{},{},{},{}", p.k, p.estimate, p.ci_low, p.ci_high)?;
    }
    Ok(())
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

fn display_name(column: &str) -> String {
    if let Some(k) = parse_dummy_column_name(column) {
        return display_k(k);
    }
    if let Some(base) = column.strip_suffix("_x_dist") {
        if let Some(k) = parse_dummy_column_name(base) {
            return format!("({}) x distance", display_k(k));
        }
        return format!("{base} x distance");
    }
    column.to_string()
}

/// Aligned-text coefficient table: estimate with significance stars over
/// the parenthesized clustered standard error, one block per coefficient.
/// Event-time rows come first (dummies, then distance interactions), capped
/// at `report_k_max` when given; remaining coefficients are listed only if
/// `show_controls` is set, otherwise summarized in the footer.
pub fn effects_table_text(
    fit: &FitResult,
    title: &str,
    report_k_max: Option<i32>,
    show_controls: bool,
) -> String {
    let keep_k = |name: &str| -> bool {
        let base = name.strip_suffix("_x_dist").unwrap_or(name);
        match (parse_dummy_column_name(base), report_k_max) {
            (Some(k), Some(max)) => k <= max,
            _ => true,
        }
    };
    let is_dummy = |name: &str| parse_dummy_column_name(name).is_some();
    let is_interaction =
        |name: &str| name.strip_suffix("_x_dist").map(is_dummy).unwrap_or(false);

    let mut ordered: Vec<&crate::estimator::Coefficient> = Vec::new();
    let mut rest: Vec<&crate::estimator::Coefficient> = Vec::new();
    for c in &fit.coefficients {
        if is_dummy(&c.name) && keep_k(&c.name) {
            ordered.push(c);
        }
    }
    for c in &fit.coefficients {
        if is_interaction(&c.name) && keep_k(&c.name) {
            ordered.push(c);
        }
    }
    for c in &fit.coefficients {
        if !is_dummy(&c.name) && !is_interaction(&c.name) {
            rest.push(c);
        }
    }

    let mut out = String::new();
    let rule = "-".repeat(44);
    out.push_str(title);
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    let mut push_block = |c: &crate::estimator::Coefficient| {
        let label = display_name(&c.name);
        out.push_str(&format!(
            "{label:<24} {:>10.3}{}\n",
            c.estimate,
            significance_stars(c.p_value)
        ));
        out.push_str(&format!("{:<24} {:>10}\n", "", format!("({:.3})", c.se)));
    };
    for c in &ordered {
        push_block(c);
    }
    if show_controls {
        for c in &rest {
            push_block(c);
        }
    }
    out.push_str(&rule);
    out.push('\n');
    if !show_controls && !rest.is_empty() {
        let names: Vec<String> = rest.iter().map(|c| c.name.clone()).collect();
        out.push_str(&format!("Controls: {}\n", names.join(", ")));
    }
    if !fit.dropped_columns.is_empty() {
        out.push_str(&format!(
            "Dropped (collinear): {}\n",
            fit.dropped_columns.join(", ")
        ));
    }
    out.push_str(&format!(
        "Observations: {}\nClusters: {}\nAdjusted R2: {:.3}\n",
        format_count(fit.n_obs),
        fit.n_clusters,
        fit.adj_r2
    ));
    out.push_str("Significance: * p<0.1, ** p<0.05, *** p<0.01\n");
    out
}

/// `1263 -> "1,263"`.
pub fn format_count(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// One distribution row in the published layout: `τ-9 | 1,263 | (0.3%)`.
pub fn format_distribution_row(k: i32, count: usize, share: f64) -> String {
    format!(
        "{} | {} | ({:.1}%)",
        display_k(k),
        format_count(count),
        share * 100.0
    )
}

/// Aligned-text treatment distribution, one section per municipality group.
pub fn distribution_text(dist: &TreatmentDistribution) -> String {
    let mut out = String::new();
    out.push_str("Treatment variable distribution\n\n");
    out.push_str("University municipalities:\n");
    for row in &dist.rows {
        out.push_str(&format_distribution_row(
            row.k,
            row.university_count,
            row.university_share,
        ));
        out.push('\n');
    }
    out.push_str("\nBuffer municipalities:\n");
    for row in &dist.rows {
        out.push_str(&format_distribution_row(row.k, row.buffer_count, row.buffer_share));
        out.push('\n');
    }
    out
}

/// Composition-balance table: covariates as columns, event times as rows,
/// estimate over parenthesized standard error, with the recovered intercept
/// and per-column fit statistics at the bottom.
pub fn balance_table_text(
    entries: &[crate::inference::BalanceEntry],
    k_lo: i32,
    k_hi: i32,
) -> String {
    const LABEL: usize = 12;
    const CELL: usize = 14;
    let mut out = String::new();
    out.push_str(&format!("{:<LABEL$}", ""));
    for e in entries {
        out.push_str(&format!("{:>CELL$}", e.covariate));
    }
    out.push('\n');

    let cell = |c: Option<&crate::estimator::Coefficient>| -> (String, String) {
        match c {
            Some(c) => (
                format!("{:.3}{}", c.estimate, significance_stars(c.p_value)),
                format!("({:.3})", c.se),
            ),
            None => ("-".to_string(), String::new()),
        }
    };
    let mut push_rows = |label: String, pick: &dyn Fn(&crate::inference::BalanceFit) -> Option<&crate::estimator::Coefficient>| {
        let mut line1 = format!("{label:<LABEL$}");
        let mut line2 = format!("{:<LABEL$}", "");
        for e in entries {
            let c = e.outcome.as_ref().ok().and_then(pick);
            let (a, b) = cell(c);
            line1.push_str(&format!("{a:>CELL$}"));
            line2.push_str(&format!("{b:>CELL$}"));
        }
        out.push_str(&line1);
        out.push('\n');
        out.push_str(&line2);
        out.push('\n');
    };
    for k in k_lo..=k_hi {
        let name = dummy_column_name(k);
        push_rows(display_k(k), &move |b| b.fit.coefficient(&name));
    }
    push_rows("Intercept".to_string(), &|b| Some(&b.intercept));

    out.push_str(&format!("{:<LABEL$}", "N"));
    for e in entries {
        match &e.outcome {
            Ok(b) => out.push_str(&format!("{:>CELL$}", format_count(b.fit.n_obs))),
            Err(_) => out.push_str(&format!("{:>CELL$}", "(error)")),
        }
    }
    out.push('\n');
    out.push_str(&format!("{:<LABEL$}", "Adj. R2"));
    for e in entries {
        match &e.outcome {
            Ok(b) => out.push_str(&format!("{:>CELL$.3}", b.fit.adj_r2)),
            Err(_) => out.push_str(&format!("{:>CELL$}", "")),
        }
    }
    out.push('\n');
    for e in entries {
        if let Err(msg) = &e.outcome {
            out.push_str(&format!("note: {}: {msg}\n", e.covariate));
        }
    }
    out
}

/// CSV form of the distribution: `k,group,count,share`.
pub fn write_distribution_csv<W: Write>(
    writer: &mut W,
    dist: &TreatmentDistribution,
) -> Result<()> {
    writeln!(writer, "k,group,count,share")?;
    for row in &dist.rows {
        writeln!(
            writer,
            "{},university,{},{}",
            row.k, row.university_count, row.university_share
        )?;
    }
    for row in &dist.rows {
        writeln!(writer, "{},buffer,{},{}", row.k, row.buffer_count, row.buffer_share)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treatment::treatment_distribution;

    #[test]
    fn count_formatting_inserts_thousands_separators() {
        assert_eq!(format_count(0), "0");
        assert_eq!(format_count(999), "999");
        assert_eq!(format_count(1263), "1,263");
        assert_eq!(format_count(918026), "918,026");
        assert_eq!(format_count(1234567), "1,234,567");
    }

    #[test]
    fn distribution_row_matches_published_layout() {
        assert_eq!(format_distribution_row(-9, 1263, 0.003), "τ-9 | 1,263 | (0.3%)");
        assert_eq!(format_distribution_row(0, 16708, 0.0402), "τ | 16,708 | (4.0%)");
        assert_eq!(format_distribution_row(4, 50416, 0.121), "τ+4 | 50,416 | (12.1%)");
    }

    #[test]
    fn stars_thresholds() {
        assert_eq!(significance_stars(0.005), "***");
        assert_eq!(significance_stars(0.03), "**");
        assert_eq!(significance_stars(0.07), "*");
        assert_eq!(significance_stars(0.2), "");
    }

    #[test]
    fn display_names_cover_dummies_and_interactions() {
        assert_eq!(display_name("ev_m2"), "τ-2");
        assert_eq!(display_name("ev_0_x_dist"), "(τ) x distance");
        assert_eq!(display_name("peer_mean"), "peer_mean");
    }

    #[test]
    fn z_critical_pins_conventional_values() {
        assert_eq!(z_critical(0.95), 1.96);
        let z99 = z_critical(0.99);
        assert!((z99 - 2.5758).abs() < 1e-3);
    }

    #[test]
    fn distribution_text_has_both_groups() {
        let dist = treatment_distribution(&[0, 0, 1], &[true, true, false], &[true, true, true]);
        let text = distribution_text(&dist);
        assert!(text.contains("University municipalities:"));
        assert!(text.contains("Buffer municipalities:"));
        assert!(text.contains("τ | 2 | (100.0%)"));
    }
}
