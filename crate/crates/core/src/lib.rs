//! MDAV microaggregation of half-hourly load profiles, privacy and utility
//! metrics, and an aggregated day-ahead forecasting backtest.
//!
//! The usual flow is [`ingest`] to a [`panel::ProfilePanel`], [`mdav`] to
//! an anonymized panel, then [`metrics`] for utility loss or [`backtest`]
//! for forecast accuracy across privacy levels.

pub mod backtest;
pub mod forecast;
pub mod ingest;
pub mod manifest;
pub mod mdav;
pub mod metrics;
pub mod panel;
pub mod seed;

pub use backtest::{run_experiment, ExperimentConfig, ExperimentReport, Level};
pub use ingest::{synth_panel, SynthConfig};
pub use mdav::{anonymize, mdav_partition, AnonymizedPanel, GroupAssignment};
pub use metrics::{privacy_sweep, MetricsReport, SweepConfig};
pub use panel::{ProfilePanel, TimeIndex};
