//! Component-level image retrieval with a detector first stage and a
//! vision-language model second stage.
//!
//! The detector screens every ontology component. Proposals strictly above
//! `tau_high` are confirmed; everything else, including attributes the
//! detector was never trained on, is put to the VLM as a Yes/No question,
//! refined once with a hint if the reply is ambiguous. Existing components
//! with a state vocabulary get a state query. The fused per-image records are
//! stored as JSON Lines and can be filtered with a small query language and
//! scored against ground truth.
//!
//! Backends are traits ([`Detector`], [`Vlm`]) with scripted and HTTP
//! implementations.

pub mod detector;
pub mod eval;
pub mod index;
pub mod ontology;
pub mod pipeline;
pub mod prompt;
pub mod query;
pub mod record;
pub mod simbench;
pub mod store;
pub mod transport;
pub mod vlm;

pub use detector::{stratify, DetectionProposal, Detector, ScriptedDetector, Stratification};
pub use eval::{binary_metrics, macro_average, ConfusionMatrix, GroundTruth, MetricsRow, Target};
pub use ontology::{ComponentOntology, ComponentSpec, ImageRef};
pub use pipeline::{Pipeline, PipelineConfig};
pub use prompt::{existence_prompt, optimize_prompt, state_prompt, PromptInstance};
pub use query::{parse_query, QuerySpec};
pub use record::{ImageResult, RetrievalRecord, Source};
pub use transport::BackendError;
pub use vlm::{classify_existence, classify_state, ExistenceVerdict, RawReply, ScriptedVlm, StateVerdict, Vlm};

use thiserror::Error;

/// Any failure surfaced to a command-line caller.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ontology(#[from] ontology::OntologyError),
    #[error(transparent)]
    Manifest(#[from] ontology::ManifestError),
    #[error(transparent)]
    Template(#[from] prompt::TemplateError),
    #[error(transparent)]
    Script(#[from] transport::ScriptError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error(transparent)]
    Store(#[from] store::StoreError),
    #[error(transparent)]
    Query(#[from] query::QueryError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Sim(#[from] simbench::SimError),
    #[error("{0}")]
    Config(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// 1 validation or configuration, 2 backend failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        use pipeline::PipelineError as P;
        let pipeline_code = |e: &P| match e {
            P::Fatal { .. } => 2,
            _ => 1,
        };
        match self {
            Error::Io(_) => 3,
            Error::Ontology(ontology::OntologyError::Io(_))
            | Error::Manifest(ontology::ManifestError::Io(_))
            | Error::Store(store::StoreError::Io(_))
            | Error::Eval(eval::EvalError::Io(_)) => 3,
            Error::Backend(_) => 2,
            Error::Pipeline(e) => pipeline_code(e),
            Error::Sim(simbench::SimError::Pipeline(e)) => pipeline_code(e),
            _ => 1,
        }
    }
}
