//! Multi-channel retrieval fusion.
//!
//! Several retrieval channels each produce a ranked item list per user. A
//! weight vector on the simplex decides how many items every channel
//! contributes to a fixed-size, de-duplicated recommendation set. This crate
//! provides the merge itself, the evaluation metrics around it and three ways
//! to pick the weights:
//!
//! * [`cem`]: cross-entropy search over a Dirichlet sampling distribution,
//! * [`bayesopt`]: Gaussian-process refinement of the Dirichlet parameters,
//! * [`policy`]: a per-user network trained with the score-function estimator.
//!
//! [`synth`] generates seeded benchmark datasets with known answers.

pub mod bayesopt;
pub mod cem;
pub mod dirichlet;
pub mod error;
pub mod fusion;
pub mod ingest;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod special;
pub mod synth;

pub use error::{FuseError, Result};
pub use fusion::{MergedSet, PersonalizedWeights, WeightVector, Weights};
pub use ingest::{ChannelRanking, Dataset, EmbeddingTable, GroundTruth, ItemId};
pub use metrics::{EvalReport, Metric};
