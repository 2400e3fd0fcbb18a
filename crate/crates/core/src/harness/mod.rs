//! Experiment plumbing: configuration, corpus and family construction,
//! decoding runs, sweeps, histograms and the property-suite runner.

pub mod config;
pub mod corpus;
pub mod experiment;
pub mod family;
pub mod suite;
pub mod sweep;
pub mod trace;

use thiserror::Error;

pub use config::{parse_pairs, parse_pairs_file, ConfigError, ExperimentConfig, FamilyKind, Method};
pub use corpus::{load_corpus, load_source, Corpus, CorpusError, Tokenizer, BUILTIN_REFERENCE};
pub use experiment::{run_experiment, run_histogram, run_with_family, ExperimentResult};
pub use family::ModelFamily;
pub use suite::{verify_suite, SuiteName, SuiteReport, SuiteResult};
pub use sweep::{read_sweep, run_sweep, write_sweep, SweepGrid, SweepRow};
pub use trace::{read_trace, write_trace, TraceRecord};

use crate::metrics::MetricsError;
use crate::models::ModelError;
use crate::verification::VerifyError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("family mismatch: {0}")]
    FamilyMismatch(String),
    #[error("no prompts: the corpus has no held-out line with at least two tokens")]
    NoPrompts,
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("invalid sweep grid: {0}")]
    Grid(String),
    #[error("row {row}: {reason}")]
    InvalidRow { row: usize, reason: String },
    #[error("internal inconsistency: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_)
            | HarnessError::Corpus(_)
            | HarnessError::FamilyMismatch(_)
            | HarnessError::NoPrompts
            | HarnessError::EmptyGrid
            | HarnessError::Grid(_) => 2,
            _ => 1,
        }
    }
}
