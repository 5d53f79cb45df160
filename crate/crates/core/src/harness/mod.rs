//! Experiment orchestration from a declarative JSON config: validation, the
//! staged pipeline, and cross-run comparison reports.

pub mod config;
pub mod report;
pub mod run;

use thiserror::Error;

pub use config::{validate_config, ConfigError, ExperimentConfig, RetrieverConfig, ValidationIssue};
pub use report::{compare_retrievers, load_summary, ComparisonTable, SummaryRow};
pub use run::{run_experiment, HypothesisRecord, RunManifest, Runner, Setting, Stage};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Embedding(#[from] crate::embedding::EmbeddingError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Prompt(#[from] crate::prompting::PromptError),
    #[error(transparent)]
    Gateway(#[from] crate::gateway::GatewayError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[error(transparent)]
    Analysis(#[from] crate::analysis::AnalysisError),
    #[error("k grids differ: {left} vs {right}")]
    GridMismatch { left: String, right: String },
    #[error("I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}
