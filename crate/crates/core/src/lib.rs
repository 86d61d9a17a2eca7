//! Host prediction for viral nucleotide sequences.
//!
//! The pipeline: [`ingest`] labeled corpora, [`preprocess`] them into fixed
//! length one-hot tensors, train the bidirectional LSTM classifier in [`nn`]
//! with the cross-validation protocol in [`trainer`], score it with
//! [`metrics`], and compare train/test corpora with [`diagnostics`].

pub mod diagnostics;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use diagnostics::{DiagnosticsReport, SequenceForm};
pub use error::{Error, Result};
pub use ingest::{LabelMap, SequenceRecord, SplitPlan};
pub use metrics::MetricsReport;
pub use nn::{Model, ModelConfig};
pub use preprocess::{ClassWeights, CleanSequence, EncodedBatch};
pub use trainer::{FoldResult, TrainConfig};
