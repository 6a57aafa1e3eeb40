//! Fine-tuning-free speculative decoding.
//!
//! A tri-gram matrix built from a small corpus stands in for the target
//! model. Each decode step searches that matrix with PUCT-guided Monte Carlo
//! Tree Search for likely continuations, merges them into a prefix-shared
//! draft tree, has the target score the whole tree in one pass, keeps the
//! longest matching path plus one target token, and reinforces the matrix
//! with what was emitted.

pub mod bench;
pub mod corpus;
pub mod distribution;
pub mod draft_tree;
pub mod engine;
pub mod matrix_file;
pub mod mcts;
pub mod target;
pub mod trigram;
pub mod verifier;

pub use corpus::{CorpusStats, TokenId, TokenizerMode, TrigramCounts, Vocabulary};
pub use distribution::Distribution;
pub use draft_tree::DraftTree;
pub use engine::{decode, DecodeMetrics, DecodeOutput, SessionConfig, Strategy, VerifyMode};
pub use mcts::{run_search, DraftCandidate, ScoreMode, SearchConfig};
pub use target::{NodeDistributions, OracleModel, OracleModelSpec, TargetModel, TargetOptions, TargetSpec};
pub use trigram::{AdjustPolicy, TrigramMatrix};
pub use verifier::{verify_greedy, verify_sampled, VerifyOutcome};
