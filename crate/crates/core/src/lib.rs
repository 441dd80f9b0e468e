//! Core library for auditing gender bias in LLM-generated essay feedback.
//!
//! The pipeline runs: [`lexicon`] swaps gendered words, [`corpus`] screens
//! essays and builds counterfactual pairs, [`promptgen`] renders the
//! experiment plan, [`llmclient`] collects feedback, [`embedder`] turns
//! feedback into vectors, [`stats`] runs permutation tests, [`tsne`] and
//! [`textstats`] describe the feedback, and [`report`] writes the tables.

pub mod corpus;
pub mod embedder;
pub mod http;
pub mod lexicon;
pub mod llmclient;
pub mod promptgen;
pub mod report;
pub mod stats;
pub mod textstats;
pub mod tsne;

pub use corpus::{CounterfactualPair, Essay, ScreenConfig, ScreenedCorpus};
pub use embedder::{EmbeddingVector, GroupEmbeddings};
pub use lexicon::{Direction, GenderLexicon};
pub use llmclient::FeedbackRecord;
pub use promptgen::{Condition, PromptJob, TemplateSet};
pub use stats::{DistanceMetric, MetricKind, PermutationResult};
pub use tsne::{TsneConfig, TsneResult};
