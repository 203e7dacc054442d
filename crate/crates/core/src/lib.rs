//! Genre-aware multi-trait automated essay scoring.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod evaluation;
pub mod feedback;
pub mod linalg;
pub mod scoring;
pub mod service;
pub mod synthetic;
pub mod tokenizer;

pub use corpus::{builtin_prompt_table, EssayRecord, Genre, PromptSpec, PromptTable, ScoreRange};
pub use evaluation::{evaluate, qwk, EvalReport, RatingPair};
pub use scoring::{score_essay, ModelConfig, ModelState, ScoreReport, ScoringError};
pub use tokenizer::{encode_essay, Vocabulary};
