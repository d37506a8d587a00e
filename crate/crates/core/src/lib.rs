//! Two-stage detoxification training on a synthetic language.
//!
//! The crate builds a template-grammar parallel corpus with a known
//! toxic→neutral lexicon, filters it by embedding similarity, cold-starts a
//! small recurrent policy with supervised fine-tuning through low-rank
//! adapters, and then optimizes it with group relative policy optimization
//! against a composite non-toxicity plus similarity reward. Evaluation
//! reports style accuracy, similarity, fluency and the joint score.
//!
//! Module map:
//! - [`corpus`]: vocabulary, grammar, pair generation, splits, corpus files
//! - [`similarity`]: hashed bag-of-token embeddings, cosine similarity, filtering
//! - [`toxicity`]: logistic non-toxicity classifiers
//! - [`policy`]: gated recurrent policy, adapters, sampling, exact gradients
//! - [`sft_trainer`]: backbone pretraining and supervised cold start
//! - [`grpo_trainer`]: reward, advantages, k3 penalty, clipped surrogate, training loop
//! - [`eval`]: STA / SIM / FL / J reports and distribution-shift evaluation
//! - [`pipeline`]: config file, staged pipeline, sweeps, curve export

pub mod corpus;
pub mod error;
pub mod eval;
pub mod grpo_trainer;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod sft_trainer;
pub mod similarity;
pub mod toxicity;

pub use error::{Error, Result};
