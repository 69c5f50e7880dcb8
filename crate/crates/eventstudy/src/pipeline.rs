//! End-to-end orchestration: geography -> panel -> design -> estimation,
//! plus the diagnostic battery. The CLI is a thin wrapper over these
//! functions; tests drive them in memory.

use crate::design::{build_design, ModelSpec};
use crate::error::Result;
use crate::estimator::{fit, FitOptions, FitResult};
use crate::geo::{assign_events, Centroid, EventMap, OpeningEvent};
use crate::inference::{
    balance_suite, placebo_run, pretrend_suite, DiagnosticsReport, Suite,
};
use crate::panel::{build_panel, Dataset, FilterConfig, IngestReport, Panel};
use crate::treatment::{relative_time, treatment_distribution, TreatmentDistribution};

/// Panel and event geography ready for estimation.
pub struct PreparedData {
    pub panel: Panel,
    pub event_map: EventMap,
    pub ingest: IngestReport,
}

/// Assign events and build the analysis panel.
pub fn prepare(
    dataset: Dataset,
    centroids: &[Centroid],
    events: &[OpeningEvent],
    radii: &[f64],
    filter: &FilterConfig,
) -> Result<PreparedData> {
    let event_map = assign_events(centroids, events, radii)?;
    let (panel, ingest) = build_panel(dataset, filter)?;
    Ok(PreparedData {
        panel,
        event_map,
        ingest,
    })
}

/// Build the design for `spec` and fit it.
pub fn estimate(prepared: &PreparedData, spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    let design = build_design(&prepared.panel, &prepared.event_map, spec)?;
    fit(&design, opts)
}

/// Run the pre-trend, placebo and balance suites, collecting per-suite
/// failures instead of aborting.
pub fn diagnose(
    prepared: &PreparedData,
    spec: &ModelSpec,
    covariates: &[String],
    opts: &FitOptions,
) -> DiagnosticsReport {
    let pretrend = Suite::from_result(pretrend_suite(
        &prepared.panel,
        &prepared.event_map,
        spec,
        opts,
    ));
    let placebo = Suite::from_result(placebo_run(
        &prepared.panel,
        &prepared.event_map,
        spec,
        opts,
    ));
    let balance = Suite::from_result(balance_suite(
        &prepared.panel,
        &prepared.event_map,
        spec,
        covariates,
        opts,
    ));
    DiagnosticsReport {
        spec: spec.clone(),
        pretrend,
        placebo,
        balance,
        singletons_dropped: prepared.panel.singletons_dropped,
    }
}

/// Tabulate the treatment-variable distribution over the prepared panel.
pub fn distribution(prepared: &PreparedData) -> Result<TreatmentDistribution> {
    let panel = &prepared.panel;
    let map = &prepared.event_map;
    let mut ks = Vec::with_capacity(panel.rows.len());
    let mut host = Vec::with_capacity(panel.rows.len());
    let mut buffer = Vec::with_capacity(panel.rows.len());
    for row in &panel.rows {
        let muni = panel.municipalities.name(row.municipality_id);
        let a = map.get(muni).ok_or_else(|| {
            crate::error::Error::Validation(format!("municipality {muni} missing from event map"))
        })?;
        ks.push(relative_time(row.year, a.opening_year));
        host.push(a.buffer_class == crate::geo::BufferClass::Host);
        buffer.push(a.buffer_class.in_analysis_sample(&map.radii));
    }
    Ok(treatment_distribution(&ks, &host, &buffer))
}
