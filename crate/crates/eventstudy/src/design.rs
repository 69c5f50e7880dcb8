//! Assembly of the regression design: event-time dummies, distance
//! interactions, controls and their distance interactions, peer means,
//! trend terms, fixed-effect and cluster identifiers.
//!
//! Column order and values are a pure function of (panel, event map, spec),
//! so repeated runs produce byte-identical design exports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::EventMap;
use crate::panel::{Covariate, Panel, PanelRow, CATEGORICAL_COLUMNS};
use crate::treatment::{build_dummies, dummy_column_name, relative_time, DummyMode, DummySystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Leads and lags with two omitted lead categories; used to test for
    /// pre-trends.
    Pretrend,
    /// Indicators for `k >= baseline_below` only; earlier periods pooled as
    /// baseline.
    Semidynamic,
    /// Semidynamic specification estimated on the outer-ring sample.
    Placebo,
    /// Event dummies only, with an observable characteristic as outcome.
    Balance,
}

impl Mode {
    pub fn dummy_mode(self) -> DummyMode {
        match self {
            Mode::Pretrend => DummyMode::Pretrend,
            _ => DummyMode::Semidynamic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeDimension {
    Municipality,
    Year,
}

impl FeDimension {
    pub fn name(self) -> &'static str {
        match self {
            FeDimension::Municipality => "municipality",
            FeDimension::Year => "year",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterBy {
    Municipality,
    State,
    Year,
}

/// Declarative regression specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub mode: Mode,
    /// Event window in relative time.
    pub k_min: i32,
    pub k_max: i32,
    /// Lead categories omitted in pretrend mode.
    pub omitted_leads: Vec<i32>,
    /// First included relative time of the semidynamic specification; all
    /// observed `k` below it are pooled into the baseline.
    pub baseline_below: i32,
    /// Student-level controls by column name (`age` plus the categorical
    /// columns of the codebook).
    pub controls: Vec<String>,
    /// Subset of `controls` also interacted with distance.
    pub distance_interacted_controls: Vec<String>,
    /// Emit each event dummy interacted with distance (on by default; the
    /// estimating equations carry these terms).
    pub distance_interactions: bool,
    /// Leave-one-out municipality-year mean of the outcome.
    pub include_peer_mean: bool,
    /// Municipality-year mean of the outcome interacted with centered time.
    pub include_mean_trend: bool,
    /// Use the leave-one-out mean in the mean-trend term instead of the
    /// full municipality-year mean.
    pub mean_trend_leave_one_out: bool,
    /// State dummies interacted with centered time.
    pub state_trends: bool,
    pub cluster_by: ClusterBy,
    pub fe: Vec<FeDimension>,
    /// Confidence level for reported intervals.
    pub confidence_level: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            mode: Mode::Semidynamic,
            k_min: -9,
            k_max: 9,
            omitted_leads: vec![-9, -3],
            baseline_below: -2,
            controls: Vec::new(),
            distance_interacted_controls: Vec::new(),
            distance_interactions: true,
            include_peer_mean: false,
            include_mean_trend: false,
            mean_trend_leave_one_out: false,
            state_trends: false,
            cluster_by: ClusterBy::Municipality,
            fe: vec![FeDimension::Municipality, FeDimension::Year],
            confidence_level: 0.95,
        }
    }
}

impl ModelSpec {
    /// The full specification: all socioeconomic controls, income and
    /// parental education interacted with distance, peer mean, mean trend
    /// and state trends. The distance-interacted subset is a documented
    /// default, not a canonical choice; pin it explicitly for reproduction
    /// runs.
    pub fn full() -> Self {
        ModelSpec {
            controls: [
                "sex",
                "race",
                "age",
                "family_income",
                "father_hs",
                "mother_hs",
                "marital_status",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            distance_interacted_controls: ["family_income", "father_hs", "mother_hs"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            include_peer_mean: true,
            include_mean_trend: true,
            state_trends: true,
            ..ModelSpec::default()
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.fe.is_empty() {
            return Err(Error::Spec("fe dimensions must be nonempty".into()));
        }
        for c in &self.distance_interacted_controls {
            if !self.controls.contains(c) {
                return Err(Error::Spec(format!(
                    "distance-interacted control {c:?} is not among controls"
                )));
            }
        }
        for c in &self.controls {
            if c != "age" && !CATEGORICAL_COLUMNS.contains(&c.as_str()) {
                return Err(Error::Spec(format!("unknown control {c:?}")));
            }
        }
        if !(0.0..1.0).contains(&self.confidence_level) {
            return Err(Error::Spec(format!(
                "confidence level {} outside (0, 1)",
                self.confidence_level
            )));
        }
        Ok(())
    }
}

/// A named numeric regressor column.
#[derive(Debug, Clone)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
}

/// Per-row identifiers for one fixed-effect dimension.
#[derive(Debug, Clone)]
pub struct FeColumn {
    pub name: String,
    pub ids: Vec<u32>,
    pub n_groups: usize,
}

/// The assembled regression inputs.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub y_name: String,
    pub y: Vec<f64>,
    pub columns: Vec<Column>,
    pub fe: Vec<FeColumn>,
    pub cluster_name: String,
    pub cluster_ids: Vec<u32>,
    pub n_clusters: usize,
    /// (student, municipality, year) keys aligned with rows.
    pub row_keys: Vec<(u32, u32, i32)>,
    /// Names of the event-time dummy columns.
    pub treatment_columns: Vec<String>,
    pub dummy_system: DummySystem,
    pub spec: ModelSpec,
    pub singletons_dropped: usize,
    /// Rows dropped because the balance outcome was missing.
    pub rows_dropped_missing_y: usize,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }
}

struct SampleRow<'a> {
    row: &'a PanelRow,
    k: i32,
    distance_km: f64,
}

fn select_sample<'a>(
    panel: &'a Panel,
    event_map: &EventMap,
    mode: Mode,
) -> Result<Vec<SampleRow<'a>>> {
    let mut out = Vec::with_capacity(panel.rows.len());
    for row in &panel.rows {
        let muni = panel.municipalities.name(row.municipality_id);
        let assignment = event_map.get(muni).ok_or_else(|| {
            Error::Validation(format!("municipality {muni} missing from event map"))
        })?;
        let keep = match mode {
            Mode::Placebo => assignment.buffer_class.in_ring(&event_map.radii),
            _ => assignment.buffer_class.in_analysis_sample(&event_map.radii),
        };
        if !keep {
            continue;
        }
        out.push(SampleRow {
            row,
            k: relative_time(row.year, assignment.opening_year),
            distance_km: assignment.distance_km,
        });
    }
    if out.is_empty() {
        let what = if mode == Mode::Placebo { "placebo ring" } else { "analysis buffer" };
        return Err(Error::Sample(format!("no panel rows fall in the {what} sample")));
    }
    Ok(out)
}

/// Build the design matrix for an estimation specification. Column order:
/// event dummies, dummy x distance, controls, control x distance,
/// peer mean, mean trend, state trends.
pub fn build_design(panel: &Panel, event_map: &EventMap, spec: &ModelSpec) -> Result<DesignMatrix> {
    spec.validate()?;
    if spec.mode == Mode::Balance {
        return Err(Error::Spec(
            "balance mode requires balance_design with a covariate".into(),
        ));
    }
    let sample = select_sample(panel, event_map, spec.mode)?;
    let ks: Vec<i32> = sample.iter().map(|s| s.k).collect();
    let dummies = build_dummies(
        &ks,
        spec.mode.dummy_mode(),
        spec.k_min,
        spec.k_max,
        &spec.omitted_leads,
        spec.baseline_below,
    )?;

    let mut columns: Vec<Column> = Vec::new();
    let mut treatment_columns = Vec::new();
    for &k in &dummies.included {
        let name = dummy_column_name(k);
        treatment_columns.push(name.clone());
        columns.push(Column {
            name,
            values: dummies.column(k),
        });
    }
    if spec.distance_interactions {
        for &k in &dummies.included {
            let base = dummy_column_name(k);
            let values = sample
                .iter()
                .enumerate()
                .map(|(i, s)| columns[index_of(&columns, &base)].values[i] * s.distance_km)
                .collect();
            columns.push(Column {
                name: format!("{base}_x_dist"),
                values,
            });
        }
    }

    for control in &spec.controls {
        for col in control_columns(control, &sample, panel, None)? {
            columns.push(col);
        }
    }
    for control in &spec.distance_interacted_controls {
        let distances: Vec<f64> = sample.iter().map(|s| s.distance_km).collect();
        for col in control_columns(control, &sample, panel, Some(&distances))? {
            columns.push(col);
        }
    }

    if spec.include_peer_mean {
        columns.push(Column {
            name: "peer_mean".into(),
            values: sample.iter().map(|s| s.row.peer_mean).collect(),
        });
    }

    // Trend terms use the year centered at the sample midpoint; centering is
    // an affine reparameterization that leaves treatment coefficients
    // unchanged but reduces collinearity with the year fixed effects.
    let year_min = sample.iter().map(|s| s.row.year).min().unwrap();
    let year_max = sample.iter().map(|s| s.row.year).max().unwrap();
    let midpoint = (year_min + year_max) as f64 / 2.0;
    if spec.include_mean_trend {
        let values = sample
            .iter()
            .map(|s| {
                let mean = if spec.mean_trend_leave_one_out {
                    s.row.peer_mean
                } else {
                    s.row.muni_year_mean
                };
                mean * (s.row.year as f64 - midpoint)
            })
            .collect();
        columns.push(Column {
            name: "grade_trend".into(),
            values,
        });
    }
    if spec.state_trends {
        let mut state_ids: Vec<u32> = sample.iter().map(|s| s.row.state_id).collect();
        state_ids.sort_unstable();
        state_ids.dedup();
        // First state (by id) is the reference; its trend is absorbed
        // jointly by the year fixed effects and the remaining trends.
        for &sid in state_ids.iter().skip(1) {
            let values = sample
                .iter()
                .map(|s| {
                    if s.row.state_id == sid {
                        s.row.year as f64 - midpoint
                    } else {
                        0.0
                    }
                })
                .collect();
            columns.push(Column {
                name: format!("trend_{}", panel.states.name(sid)),
                values,
            });
        }
    }

    let y: Vec<f64> = sample.iter().map(|s| s.row.outcome).collect();
    finish_design(
        "outcome".into(),
        y,
        columns,
        &sample,
        panel,
        spec,
        dummies,
        treatment_columns,
        0,
    )
}

/// Build a composition (balance) design: the covariate as outcome, event
/// dummies as the only regressors, municipality and year fixed effects.
pub fn balance_design(
    panel: &Panel,
    event_map: &EventMap,
    spec: &ModelSpec,
    covariate: &str,
) -> Result<DesignMatrix> {
    spec.validate()?;
    let cov = Covariate::parse(covariate)?;
    let sample_all = select_sample(panel, event_map, Mode::Semidynamic)?;
    let mut sample = Vec::with_capacity(sample_all.len());
    let mut y = Vec::with_capacity(sample_all.len());
    let mut missing = 0usize;
    for s in sample_all {
        match cov.value(s.row, &panel.codebook) {
            Some(v) => {
                y.push(v);
                sample.push(s);
            }
            None => missing += 1,
        }
    }
    if sample.is_empty() {
        return Err(Error::Sample(format!(
            "covariate {covariate} is missing for every sampled row"
        )));
    }

    let ks: Vec<i32> = sample.iter().map(|s| s.k).collect();
    let dummies = build_dummies(
        &ks,
        DummyMode::Semidynamic,
        spec.k_min,
        spec.k_max,
        &spec.omitted_leads,
        spec.baseline_below,
    )?;
    let mut columns = Vec::new();
    let mut treatment_columns = Vec::new();
    for &k in &dummies.included {
        let name = dummy_column_name(k);
        treatment_columns.push(name.clone());
        columns.push(Column {
            name,
            values: dummies.column(k),
        });
    }

    let mut balance_spec = spec.clone().with_mode(Mode::Balance);
    balance_spec.fe = vec![FeDimension::Municipality, FeDimension::Year];
    finish_design(
        covariate.to_string(),
        y,
        columns,
        &sample,
        panel,
        &balance_spec,
        dummies,
        treatment_columns,
        missing,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish_design(
    y_name: String,
    y: Vec<f64>,
    columns: Vec<Column>,
    sample: &[SampleRow<'_>],
    panel: &Panel,
    spec: &ModelSpec,
    dummy_system: DummySystem,
    treatment_columns: Vec<String>,
    rows_dropped_missing_y: usize,
) -> Result<DesignMatrix> {
    let n = y.len();
    for (i, v) in y.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "non-finite outcome {y_name} at sample row {i}"
            )));
        }
    }
    for col in &columns {
        debug_assert_eq!(col.values.len(), n);
        if let Some(i) = col.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value in column {} at sample row {i}",
                col.name
            )));
        }
    }
    let mut names = BTreeMap::new();
    for col in &columns {
        if names.insert(col.name.clone(), ()).is_some() {
            return Err(Error::Spec(format!("duplicate column name {}", col.name)));
        }
    }

    let fe = spec
        .fe
        .iter()
        .map(|dim| {
            let ids: Vec<u32> = match dim {
                FeDimension::Municipality => {
                    sample.iter().map(|s| s.row.municipality_id).collect()
                }
                FeDimension::Year => {
                    let year_min = sample.iter().map(|s| s.row.year).min().unwrap();
                    sample
                        .iter()
                        .map(|s| (s.row.year - year_min) as u32)
                        .collect()
                }
            };
            FeColumn {
                name: dim.name().to_string(),
                n_groups: dense_group_count(&ids),
                ids,
            }
        })
        .collect();

    let cluster_ids: Vec<u32> = match spec.cluster_by {
        ClusterBy::Municipality => sample.iter().map(|s| s.row.municipality_id).collect(),
        ClusterBy::State => sample.iter().map(|s| s.row.state_id).collect(),
        ClusterBy::Year => {
            let year_min = sample.iter().map(|s| s.row.year).min().unwrap();
            sample
                .iter()
                .map(|s| (s.row.year - year_min) as u32)
                .collect()
        }
    };
    let cluster_name = match spec.cluster_by {
        ClusterBy::Municipality => "municipality",
        ClusterBy::State => "state",
        ClusterBy::Year => "year",
    };
    let n_clusters = dense_group_count(&cluster_ids);

    let row_keys = sample
        .iter()
        .map(|s| (s.row.student_id, s.row.municipality_id, s.row.year))
        .collect();

    Ok(DesignMatrix {
        y_name,
        y,
        columns,
        fe,
        cluster_name: cluster_name.to_string(),
        cluster_ids,
        n_clusters,
        row_keys,
        treatment_columns,
        dummy_system,
        spec: spec.clone(),
        singletons_dropped: panel.singletons_dropped,
        rows_dropped_missing_y,
    })
}

fn dense_group_count(ids: &[u32]) -> usize {
    let mut sorted: Vec<u32> = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted.len()
}

fn index_of(columns: &[Column], name: &str) -> usize {
    columns.iter().position(|c| c.name == name).expect("column exists")
}

/// Expand one control into numeric columns. Categorical controls one-hot
/// against the codebook reference level, with an explicit `_missing` level
/// when missing values are present. With `distance` given, each column is
/// multiplied by it and suffixed `_x_dist`.
fn control_columns(
    control: &str,
    sample: &[SampleRow<'_>],
    panel: &Panel,
    distance: Option<&[f64]>,
) -> Result<Vec<Column>> {
    let suffix = |name: String| match distance {
        Some(_) => format!("{name}_x_dist"),
        None => name,
    };
    let apply = |values: Vec<f64>| -> Vec<f64> {
        match distance {
            Some(d) => values.iter().zip(d).map(|(v, d)| v * d).collect(),
            None => values,
        }
    };

    if control == "age" {
        let missing = sample.iter().filter(|s| s.row.age.is_none()).count();
        if missing > 0 {
            return Err(Error::Data(format!(
                "control age has {missing} missing value(s); numeric controls do not \
                 support a missing level"
            )));
        }
        let values: Vec<f64> = sample.iter().map(|s| s.row.age.unwrap()).collect();
        return Ok(vec![Column {
            name: suffix("age".into()),
            values: apply(values),
        }]);
    }

    if !CATEGORICAL_COLUMNS.contains(&control) {
        return Err(Error::Spec(format!("unknown control {control:?}")));
    }
    let codes = &panel.codebook.columns[control];
    let cat_of = |row: &PanelRow| match control {
        "sex" => row.sex,
        "race" => row.race,
        "family_income" => row.family_income,
        "father_hs" => row.father_hs,
        "mother_hs" => row.mother_hs,
        "marital_status" => row.marital_status,
        _ => unreachable!(),
    };

    let mut out = Vec::new();
    for (idx, code) in codes.levels.keys().enumerate() {
        if *code == codes.reference {
            continue;
        }
        let idx = idx as u8;
        let values: Vec<f64> = sample
            .iter()
            .map(|s| if cat_of(s.row).0 == idx { 1.0 } else { 0.0 })
            .collect();
        out.push(Column {
            name: suffix(format!("{control}_{code}")),
            values: apply(values),
        });
    }
    let any_missing = sample.iter().any(|s| cat_of(s.row).is_missing());
    if any_missing {
        let values: Vec<f64> = sample
            .iter()
            .map(|s| if cat_of(s.row).is_missing() { 1.0 } else { 0.0 })
            .collect();
        out.push(Column {
            name: suffix(format!("{control}_missing")),
            values: apply(values),
        });
    }
    Ok(out)
}

/// Export the design as CSV: one header row, then numeric rows.
pub fn write_design_csv<W: Write>(writer: W, design: &DesignMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "student_id".to_string(),
        "municipality_id".to_string(),
        "year".to_string(),
        design.y_name.clone(),
    ];
    header.extend(design.columns.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for i in 0..design.n_rows() {
        let (student, muni, year) = design.row_keys[i];
        let mut rec = vec![
            student.to_string(),
            muni.to_string(),
            year.to_string(),
            design.y[i].to_string(),
        ];
        rec.extend(design.columns.iter().map(|c| c.values[i].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// JSON sidecar describing an exported design.
#[derive(Debug, Serialize)]
pub struct DesignSidecar<'a> {
    pub columns: Vec<&'a str>,
    pub n_rows: usize,
    pub fe_cardinalities: BTreeMap<&'a str, usize>,
    pub n_clusters: usize,
    pub singletons_dropped: usize,
    pub rows_dropped_missing_y: usize,
    pub spec: &'a ModelSpec,
}

impl DesignMatrix {
    pub fn sidecar(&self) -> DesignSidecar<'_> {
        DesignSidecar {
            columns: self.columns.iter().map(|c| c.name.as_str()).collect(),
            n_rows: self.n_rows(),
            fe_cardinalities: self
                .fe
                .iter()
                .map(|f| (f.name.as_str(), f.n_groups))
                .collect(),
            n_clusters: self.n_clusters,
            singletons_dropped: self.singletons_dropped,
            rows_dropped_missing_y: self.rows_dropped_missing_y,
            spec: &self.spec,
        }
    }
}
