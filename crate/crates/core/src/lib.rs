//! Thematic analysis of interview transcripts with a language model:
//! ingestion and chunking, per-kind coding, codebook reduction, theme
//! grouping and persona generation, plus a staged pipeline runner.

pub mod codebook;
pub mod coding;
pub mod corpus;
pub mod gateway;
pub mod json_extract;
pub mod persona;
pub mod pipeline;
pub mod text;
pub mod themes;
