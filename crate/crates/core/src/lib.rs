//! Black-box training-data extraction and memorization auditing for
//! language models.
//!
//! Models are reached through [`LanguageModel`]: either a local character
//! n-gram [`NgramModel`] or a [`RemoteModel`] speaking the JSON scoring
//! protocol. The attack samples from the target, scores every sample with
//! membership-inference metrics, de-duplicates, selects candidates and
//! optionally verifies them against a known corpus. The [`canary`] module
//! builds planted-secret benchmarks with known ground truth.

pub mod canary;
pub mod dedup;
pub mod error;
pub mod generation;
pub mod ground_truth;
pub mod lm;
pub mod metrics;
pub mod pipeline;
pub mod reference;
pub mod remote;

pub use error::{Error, Result};
pub use generation::{GeneratedSample, SamplerConfig, Strategy};
pub use ground_truth::{Corpus, Document};
pub use lm::{Candidate, LanguageModel, ModelHandle, ModelKind, NextTokenDistribution, SequenceScore, Token, Vocabulary};
pub use metrics::{MetricKind, ScoredSample};
pub use pipeline::{run_attack, AttackConfig, RunSummary};
pub use reference::{NgramModel, TrainingConfig};
pub use remote::{RemoteEndpoint, RemoteModel};
