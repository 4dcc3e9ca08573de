//! AUC, relative improvement, per-scenario breakdowns, and mutual-unit
//! traces.

mod metrics;
mod report;
mod trace;

pub use metrics::{auc, rela_impr};
pub use report::{
    per_scenario_eval, per_scenario_table, predict_all, MetricsReport, RelaImprEntry, ScenarioRow, ScenarioTable,
    METRICS_FORMAT,
};
pub use trace::{MutualTrace, GATE_BINS, TRACE_FORMAT};
