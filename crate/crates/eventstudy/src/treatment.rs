//! Relative event time and the event-time dummy system.
//!
//! For each observation, relative time `k` is the observation year minus the
//! opening year of the municipality's assigned event. The dummy system turns
//! `k` into indicator columns:
//!
//! * `pretrend` — indicators for every `k` in the window except two omitted
//!   lead categories (defaults `k = -9` and `k = -3`), the minimum number of
//!   restrictions that identifies the fully dynamic model;
//! * `semidynamic` — indicators only for `k >= -2` (the anticipation
//!   horizon); all earlier periods are pooled into the baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative event time: observation year minus opening year.
pub fn relative_time(year: i32, opening_year: i32) -> i32 {
    year - opening_year
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DummyMode {
    Pretrend,
    Semidynamic,
}

/// Indicator column name for relative time `k`: `ev_m2`, `ev_0`, `ev_p4`.
pub fn dummy_column_name(k: i32) -> String {
    match k.signum() {
        -1 => format!("ev_m{}", -k),
        0 => "ev_0".to_string(),
        _ => format!("ev_p{k}"),
    }
}

/// Parse a dummy column name back to its relative time.
pub fn parse_dummy_column_name(name: &str) -> Option<i32> {
    if name == "ev_0" {
        return Some(0);
    }
    if let Some(rest) = name.strip_prefix("ev_m") {
        return rest.parse::<i32>().ok().map(|k| -k);
    }
    name.strip_prefix("ev_p")?.parse::<i32>().ok()
}

/// Display label for relative time `k` in tables: `τ-2`, `τ`, `τ+4`.
pub fn display_k(k: i32) -> String {
    match k.signum() {
        -1 => format!("τ-{}", -k),
        0 => "τ".to_string(),
        _ => format!("τ+{k}"),
    }
}

/// The event-time dummy system for one specification: which `k` get an
/// indicator column, which serve as baseline, and the per-row `k` values.
#[derive(Debug, Clone)]
pub struct DummySystem {
    pub mode: DummyMode,
    pub k_min: i32,
    pub k_max: i32,
    /// Relative times with an indicator column, ascending.
    pub included: Vec<i32>,
    /// Observed relative times serving as baseline (all-zero indicators).
    pub omitted: Vec<i32>,
    /// Relative time of each row, aligned with the panel slice used.
    pub k_per_row: Vec<i32>,
}

impl DummySystem {
    /// Materialize the 0/1 indicator column for one included `k`.
    pub fn column(&self, k: i32) -> Vec<f64> {
        self.k_per_row
            .iter()
            .map(|&rk| if rk == k { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.included.iter().map(|&k| dummy_column_name(k)).collect()
    }
}

/// Build the dummy system for the rows' relative times.
///
/// `omitted_leads` applies to pretrend mode only; `baseline_below` is the
/// first included `k` of semidynamic mode (every observed `k` below it is
/// baseline). An observed `k` that is neither included nor coverable by an
/// omitted/baseline category is a configuration error listing the offenders.
pub fn build_dummies(
    ks: &[i32],
    mode: DummyMode,
    k_min: i32,
    k_max: i32,
    omitted_leads: &[i32],
    baseline_below: i32,
) -> Result<DummySystem> {
    if k_min >= k_max {
        return Err(Error::Config(format!(
            "event window [{k_min}, {k_max}] is empty"
        )));
    }
    let mut observed: Vec<i32> = ks.to_vec();
    observed.sort_unstable();
    observed.dedup();

    let (included, omitted) = match mode {
        DummyMode::Pretrend => {
            for &o in omitted_leads {
                if o < k_min || o > k_max {
                    return Err(Error::Config(format!(
                        "omitted category {o} outside window [{k_min}, {k_max}]"
                    )));
                }
            }
            let offenders: Vec<i32> = observed
                .iter()
                .copied()
                .filter(|k| *k < k_min || *k > k_max)
                .collect();
            if !offenders.is_empty() {
                return Err(Error::Config(format!(
                    "observed relative times outside window [{k_min}, {k_max}] \
                     with no baseline to absorb them: {offenders:?}"
                )));
            }
            let included: Vec<i32> = (k_min..=k_max)
                .filter(|k| !omitted_leads.contains(k))
                .collect();
            if included.is_empty() {
                return Err(Error::Config("all categories omitted".into()));
            }
            let mut omitted = omitted_leads.to_vec();
            omitted.sort_unstable();
            omitted.dedup();
            (included, omitted)
        }
        DummyMode::Semidynamic => {
            if baseline_below <= k_min || baseline_below > k_max {
                return Err(Error::Config(format!(
                    "semidynamic baseline boundary {baseline_below} outside window \
                     ({k_min}, {k_max}]"
                )));
            }
            let offenders: Vec<i32> =
                observed.iter().copied().filter(|k| *k > k_max).collect();
            if !offenders.is_empty() {
                return Err(Error::Config(format!(
                    "observed relative times beyond k_max = {k_max}: {offenders:?}"
                )));
            }
            let included: Vec<i32> = (baseline_below..=k_max).collect();
            let omitted: Vec<i32> = observed
                .iter()
                .copied()
                .filter(|k| *k < baseline_below)
                .collect();
            (included, omitted)
        }
    };

    Ok(DummySystem {
        mode,
        k_min,
        k_max,
        included,
        omitted,
        k_per_row: ks.to_vec(),
    })
}

/// One row of the treatment-variable distribution table.
#[derive(Debug, Clone, Serialize)]
pub struct DistributionRow {
    pub k: i32,
    pub university_count: usize,
    pub university_share: f64,
    pub buffer_count: usize,
    pub buffer_share: f64,
}

/// Distribution of the treatment variable by relative time, for the
/// university (host) municipalities and for the whole analysis buffer.
#[derive(Debug, Clone, Serialize)]
pub struct TreatmentDistribution {
    pub rows: Vec<DistributionRow>,
    pub university_total: usize,
    pub buffer_total: usize,
}

/// Tabulate counts and shares of observations per relative time. `is_host`
/// and `in_buffer` flag each row's municipality group; shares within each
/// group sum to one.
pub fn treatment_distribution(
    ks: &[i32],
    is_host: &[bool],
    in_buffer: &[bool],
) -> TreatmentDistribution {
    assert_eq!(ks.len(), is_host.len());
    assert_eq!(ks.len(), in_buffer.len());
    let (lo, hi) = match (ks.iter().min(), ks.iter().max()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => {
            return TreatmentDistribution {
                rows: Vec::new(),
                university_total: 0,
                buffer_total: 0,
            }
        }
    };
    let span = (hi - lo + 1) as usize;
    let mut uni = vec![0usize; span];
    let mut buf = vec![0usize; span];
    let mut uni_total = 0usize;
    let mut buf_total = 0usize;
    for ((&k, &h), &b) in ks.iter().zip(is_host).zip(in_buffer) {
        let idx = (k - lo) as usize;
        if h {
            uni[idx] += 1;
            uni_total += 1;
        }
        if b {
            buf[idx] += 1;
            buf_total += 1;
        }
    }
    let share = |c: usize, total: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
    let rows = (lo..=hi)
        .map(|k| {
            let idx = (k - lo) as usize;
            DistributionRow {
                k,
                university_count: uni[idx],
                university_share: share(uni[idx], uni_total),
                buffer_count: buf[idx],
                buffer_share: share(buf[idx], buf_total),
            }
        })
        .collect();
    TreatmentDistribution {
        rows,
        university_total: uni_total,
        buffer_total: buf_total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_time_is_year_minus_opening() {
        assert_eq!(relative_time(2013, 2009), 4);
        assert_eq!(relative_time(2009, 2009), 0);
        assert_eq!(relative_time(2004, 2013), -9);
    }

    #[test]
    fn column_names_roundtrip() {
        for k in -9..=9 {
            let name = dummy_column_name(k);
            assert_eq!(parse_dummy_column_name(&name), Some(k));
        }
        assert_eq!(dummy_column_name(-8), "ev_m8");
        assert_eq!(dummy_column_name(0), "ev_0");
        assert_eq!(dummy_column_name(1), "ev_p1");
        assert_eq!(parse_dummy_column_name("ev_m8_x_dist"), None);
    }

    #[test]
    fn display_labels() {
        assert_eq!(display_k(-9), "τ-9");
        assert_eq!(display_k(0), "τ");
        assert_eq!(display_k(5), "τ+5");
    }

    #[test]
    fn semidynamic_pools_early_periods() {
        let ks = vec![-5, -2, 0, 2, 7];
        let sys = build_dummies(&ks, DummyMode::Semidynamic, -9, 9, &[], -2).unwrap();
        assert_eq!(sys.included, (-2..=9).collect::<Vec<_>>());
        assert_eq!(sys.omitted, vec![-5]);
        // Row at k = -5 is baseline: all indicators zero.
        for &k in &sys.included {
            assert_eq!(sys.column(k)[0], 0.0);
        }
        // Row at k = 2: exactly the k = 2 indicator is one.
        for &k in &sys.included {
            assert_eq!(sys.column(k)[3], if k == 2 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn pretrend_omits_the_two_lead_categories() {
        let ks = vec![-9, -3, -4, 0];
        let sys = build_dummies(&ks, DummyMode::Pretrend, -9, 9, &[-9, -3], -2).unwrap();
        assert!(!sys.included.contains(&-9));
        assert!(!sys.included.contains(&-3));
        assert!(sys.included.contains(&-8));
        assert!(sys.included.contains(&-2));
        // Rows at omitted categories have all-zero indicators.
        for &k in &sys.included {
            let col = sys.column(k);
            assert_eq!(col[0], 0.0);
            assert_eq!(col[1], 0.0);
        }
    }

    #[test]
    fn at_most_one_indicator_per_row() {
        let ks: Vec<i32> = (-9..=9).chain(-9..=9).collect();
        let sys = build_dummies(&ks, DummyMode::Pretrend, -9, 9, &[-9, -3], -2).unwrap();
        for row in 0..ks.len() {
            let ones: usize = sys
                .included
                .iter()
                .map(|&k| sys.column(k)[row] as usize)
                .sum();
            assert!(ones <= 1);
        }
    }

    #[test]
    fn out_of_window_is_a_config_error_listing_offenders() {
        let ks = vec![-12, 0, 11];
        let err = build_dummies(&ks, DummyMode::Pretrend, -9, 9, &[-9, -3], -2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("-12") && msg.contains("11"), "{msg}");

        // Semidynamic absorbs anything below the baseline boundary but still
        // rejects observations beyond the upper edge.
        let err = build_dummies(&ks, DummyMode::Semidynamic, -9, 9, &[], -2).unwrap_err();
        assert!(err.to_string().contains("11"));
        let ok = build_dummies(&[-12, 0], DummyMode::Semidynamic, -9, 9, &[], -2).unwrap();
        assert_eq!(ok.omitted, vec![-12]);
    }

    #[test]
    fn wider_window_preserves_shared_columns() {
        let ks = vec![-2, 0, 3];
        let narrow = build_dummies(&ks, DummyMode::Semidynamic, -9, 5, &[], -2).unwrap();
        let wide = build_dummies(&ks, DummyMode::Semidynamic, -9, 9, &[], -2).unwrap();
        for &k in &narrow.included {
            assert_eq!(narrow.column(k), wide.column(k));
        }
    }

    #[test]
    fn distribution_counts_and_shares() {
        let ks = vec![0, 0, 0, 1, 1, 2, 2, 2, 2, 3];
        let host = vec![true; 10];
        let buffer = vec![true; 10];
        let dist = treatment_distribution(&ks, &host, &buffer);
        assert_eq!(dist.rows[0].k, 0);
        assert_eq!(dist.rows[0].university_count, 3);
        assert!((dist.rows[0].university_share - 0.3).abs() < 1e-12);
        let total: f64 = dist.rows.iter().map(|r| r.university_share).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let count: usize = dist.rows.iter().map(|r| r.buffer_count).sum();
        assert_eq!(count, 10);
    }

    #[test]
    fn distribution_keeps_empty_categories() {
        let ks = vec![0, 3];
        let dist = treatment_distribution(&ks, &[true, true], &[true, true]);
        assert_eq!(dist.rows.len(), 4);
        assert_eq!(dist.rows[1].k, 1);
        assert_eq!(dist.rows[1].university_count, 0);
        assert_eq!(dist.rows[1].university_share, 0.0);
    }
}
