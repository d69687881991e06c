//! Experiment orchestration: configuration, seeded trial execution over
//! (model, combiner, n, d) grids, aggregation into bias/MSE summaries, and
//! CSV/JSON emission. Trials run in parallel on independent substreams, so a
//! given configuration and master seed produce byte-identical output
//! regardless of thread count.

mod aggregate;
mod config;
mod gmm_run;
mod output;
mod partition;
mod run;

pub use aggregate::{aggregate, attach_predictions, SummaryRow};
pub use config::{CombinerChoice, ExperimentConfig, GmmTruth, ModelSpec, PartitionScheme};
pub use gmm_run::{gmm_demo, test_ll_by_trial, GmmDemoConfig, GmmDemoRow, GmmDemoTrial};
pub use output::{render_summary, write_results, OutputFormat, SUMMARY_HEADER};
pub use partition::partition_data;
pub use run::{run_experiment, TrialRecord};
