//! Knowledge tracing toolkit.
//!
//! Predicts whether a student answers the next question correctly from the
//! history of their earlier answers. Provides naive baselines, Bayesian
//! Knowledge Tracing, a count-feature logistic regression (Best-LR), small
//! DKT/SAKT neural models, the prompt pipeline used to pose the same task to
//! large language models, and the metrics and harness that compare them.

pub mod baselines;
pub mod bkt;
pub mod dataset;
pub mod features;
pub mod harness;
pub mod llm;
pub mod logreg;
pub mod metrics;
pub mod neural;
pub mod prediction;

pub use dataset::{Dataset, InteractionRecord, ItemId, SkillId, StudentSequence};
pub use features::HistoryFeatures;
pub use prediction::{Label, Prediction};
