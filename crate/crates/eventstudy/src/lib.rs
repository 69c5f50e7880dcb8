//! Staggered-adoption event-study estimation at student level.
//!
//! The crate covers the full pipeline:
//!
//! * [`geo`] — haversine distances and buffer-based assignment of
//!   municipalities to opening events;
//! * [`panel`] — ingestion, filtering and per-year standardization of exam
//!   records, with leave-one-out peer means;
//! * [`treatment`] — relative event time and the event-time dummy system;
//! * [`design`] — assembly of the regressor set: dummies, distance
//!   interactions, controls, trend terms, fixed-effect and cluster ids;
//! * [`estimator`] — fixed-effect absorption by alternating projections,
//!   rank-revealing least squares and cluster-robust covariance;
//! * [`inference`] — the joint pre-trend test, ring placebo and
//!   composition-balance suites;
//! * [`dgp`] — a behavioral effort-choice data generator whose analytic
//!   effect path makes every estimator claim checkable;
//! * [`pipeline`] — end-to-end orchestration used by the CLI.
//!
//! The accompanying book under `book/` walks through the concepts; its code
//! snippets are compiled and run as doc-tests of this crate.

pub mod design;
pub mod dgp;
pub mod error;
pub mod estimator;
pub mod geo;
pub mod inference;
pub mod panel;
pub mod pipeline;
pub mod report;
pub mod treatment;

pub use error::{Error, Result};

// Keep the book's code snippets honest: each chapter is attached as a doc
// comment here so `cargo test --doc` compiles and runs them.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/effort-model.md")]
    pub struct EffortModel;
    #[doc = include_str!("../../../book/src/geography.md")]
    pub struct Geography;
    #[doc = include_str!("../../../book/src/panel.md")]
    pub struct PanelChapter;
    #[doc = include_str!("../../../book/src/event-time.md")]
    pub struct EventTime;
    #[doc = include_str!("../../../book/src/estimation.md")]
    pub struct Estimation;
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    pub struct Diagnostics;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct CliChapter;
}
