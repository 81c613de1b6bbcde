//! Negative-supervision construction: error identification against a vision
//! error codebook, corrective conversations, and dataset plumbing.

mod build;
mod codebook;
mod conversation;
pub mod llava;
pub mod llm;
mod oracle;

pub use build::{
    assemble_nsft_sample, balance_yes_no, construct_conversation, ocrvqa_pairs, render_turn, yes_fraction,
    AssemblyMode, ConstructionStyle, NsftSample, DEFAULT_TURNS, DEFAULT_YES_BAND,
};
pub use codebook::{ErrorCategory, ErrorCodebook, ErrorLevel};
pub use conversation::{Conversation, Provenance, Turn};
pub use oracle::{scan_clauses, ErrorOracle, IdentifiedError, LocatedClause, RuleOracle};
