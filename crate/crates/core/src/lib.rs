//! Reference-based scoring of interleaved image-text answers.
//!
//! An answer is markdown prose with image placeholders `![alt](IMG#k)` that
//! point into the images retrieved for a query. Answers are compared with a
//! reference answer on five metrics, all reported on a 0-100 scale:
//!
//! * ROUGE-1 F1 over the prose ([`text`]);
//! * normalized edit distance and a concordant-pair ordering score over the
//!   image index sequences ([`sequence`]);
//! * context alignment and image-text similarity through a
//!   [`provider::ScoringProvider`] ([`consistency`]).
//!
//! [`evaluator`] runs the pipeline and aggregates corpus reports,
//! [`analysis`] correlates scores with human judgements and [`reward`] turns
//! a report into a training reward.

pub mod analysis;
pub mod answer;
pub mod consistency;
pub mod corpus;
pub mod evaluator;
pub mod provider;
pub mod reward;
pub mod sequence;
pub mod text;

pub use answer::{parse_answer, FailureFlags, ImageContext, ParsedAnswer};
pub use corpus::{load_corpus, Category, EvalSample, ImageAsset, RetrievedDocument};
pub use evaluator::{
    aggregate, evaluate_corpus, evaluate_sample, CorpusReport, EvalConfig, SampleReport,
};
pub use provider::{HttpProvider, MockProvider, ScoringProvider};
pub use reward::{compute_reward, RewardConfig};
pub use sequence::ImageSequence;
