//! Consonant-error detection for child speech from acoustic segment
//! embeddings.
//!
//! The pipeline: synthesize or ingest a segment corpus, extract log-mel
//! features with corpus-level normalization, train bidirectional recurrent
//! embedding extractors on consonant and consonant+vowel segments, score
//! test segments against typically-developing references, and evaluate
//! detection quality (EER/AUC) with score fusion across the two segment
//! kinds.

pub mod archive;
pub mod audio;
pub mod cli;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod ioutil;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod scoring;
pub mod synth;
