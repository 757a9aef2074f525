//! LLM-assisted qualitative coding of software requirement statements.
//!
//! The pipeline ingests pre-segmented requirement statements and two human
//! annotation sets, builds consensus gold, renders prompts for every cell of
//! the shot type x prompt length x context level grid, collects labels from a
//! chat-completion endpoint (or a scripted mock), and scores them with Cohen's
//! kappa, run-to-run SD/ICC and macro precision/recall/F1.

pub mod cli;
pub mod corpus;
pub mod llm;
pub mod metrics;
pub mod prompt;
pub mod report;
pub mod runner;

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
