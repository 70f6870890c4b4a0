//! Batch orchestration: ingest, diagnose, split and scale, train, predict,
//! evaluate and DM testing, with every intermediate cached under the output
//! directory and stamped with the configuration hash.

pub mod artifacts;
pub mod config;
mod report;
mod stages;

use std::fmt;

use thiserror::Error;

use crate::data::DataError;
use crate::diagnostics::DiagnosticsError;
use crate::evaluation::EvalError;
use crate::models::ModelError;
use crate::split::SplitError;

pub use artifacts::Layout;
pub use config::{DmPair, RunConfig};
pub use report::{
    dm_table, emit_diagnostics, emit_dm, emit_metrics, emit_tables, summary_text, BenchmarkReport, DiagnosticsSummary, DmRow, MetricRow, Provenance,
};
pub use stages::{compare_forecasts, read_forecasts, run_pipeline, ForecastRow, Forecasts, Run};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Diagnose,
    Train,
    Predict,
    Evaluate,
    Dm,
    Report,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Diagnose => "diagnose",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Dm => "dm",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Failure class, mapped one-to-one onto process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 1,
            ErrorKind::Data | ErrorKind::Io => 2,
            ErrorKind::Numeric => 3,
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            stage,
            kind,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    fn context(mut self, what: &str) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    pub(crate) fn data(stage: Stage, e: DataError) -> Self {
        Self::new(stage, ErrorKind::Data, e.to_string())
    }

    pub(crate) fn split(stage: Stage, e: SplitError) -> Self {
        let kind = match e {
            SplitError::Fractions(_) | SplitError::Config(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        };
        Self::new(stage, kind, e.to_string())
    }

    pub(crate) fn diagnostics(stage: Stage, e: DiagnosticsError) -> Self {
        let kind = match e {
            DiagnosticsError::Config(_) => ErrorKind::Config,
            DiagnosticsError::Singular | DiagnosticsError::ZeroSeasonalVariance => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        };
        Self::new(stage, kind, e.to_string())
    }

    pub(crate) fn model(stage: Stage, e: ModelError) -> Self {
        let kind = match e {
            ModelError::Config(_) | ModelError::WindowLength { .. } | ModelError::Checkpoint(_) => {
                ErrorKind::Config
            }
            ModelError::EmptyWindows => ErrorKind::Data,
            ModelError::Io(_) => ErrorKind::Io,
            _ => ErrorKind::Numeric,
        };
        Self::new(stage, kind, e.to_string())
    }

    pub(crate) fn eval(stage: Stage, e: EvalError) -> Self {
        let kind = match e {
            EvalError::LengthMismatch(..) | EvalError::Empty | EvalError::TooShortForLag { .. } => ErrorKind::Data,
            EvalError::Horizon(_) => ErrorKind::Config,
            EvalError::Indistinguishable => ErrorKind::Numeric,
        };
        Self::new(stage, kind, e.to_string())
    }

    pub(crate) fn csv(stage: Stage, e: csv::Error) -> Self {
        Self::new(stage, ErrorKind::Data, e.to_string())
    }
}
