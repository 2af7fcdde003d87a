//! Experiment runner: load, filter, split, fit every configured model,
//! predict the test students step by step, and tabulate the metrics.

mod config;
mod model;
mod run;
mod table;

use thiserror::Error;

pub use config::{
    BackendKind, DatasetConfig, ExperimentConfig, LlmConfig, ModelEntry, ModelKind, ModelParams, SplitConfig,
};
pub use model::{fit_model, Fitted, TrainedModel};
pub use run::{
    build_backend, evaluate_llm, evaluate_predictor, prepare_data, run_experiment, run_experiment_with_backend,
    write_outputs, PreparedData,
};
pub use table::{emit_table, parse_csv, CsvRow, ResultRow, ResultsTable, TableFormat, METRIC_COLUMNS};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("model error: {0}")]
    Model(String),
}

impl HarnessError {
    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Data(_) => 2,
            HarnessError::Model(_) => 3,
        }
    }
}

impl From<crate::dataset::DatasetError> for HarnessError {
    fn from(e: crate::dataset::DatasetError) -> Self {
        HarnessError::Data(e.to_string())
    }
}
