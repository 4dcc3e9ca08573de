//! Command-line pipeline: synthesize data, train, evaluate, run suites.

mod app;
mod commands;
mod config;
mod run;

pub use app::{main, run, Cli, Command, RunArgs};
pub use commands::{
    cmd_eval, cmd_suite, cmd_synth, cmd_train, load_spec, parse_spec, train_into, Split, Suite, SuiteRow, SuiteTable,
    SynthSummary, TrainArtifacts, ABLATION_VARIANTS, PER_SCENARIO_VARIANTS, SUITE_FORMAT, TRAIN_LOG_FORMAT,
};
pub use config::{DataSection, ModelSection, OptimSection, RunConfig};
pub use run::{encode_splits, evaluate, load_data, report, train, train_with, EpochLog, TrainOutcome};
