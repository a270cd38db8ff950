//! Code one interview for all four kinds against the offline mock.
//!
//!     cargo run --example code_with_mock

use std::path::Path;
use std::sync::Arc;

use thematica::coding::{self, CodingOptions, KindSpec};
use thematica::corpus::{self, ChunkBounds, CleaningRules};
use thematica::gateway::mock::MockBackend;
use thematica::gateway::synthetic::SyntheticResponder;
use thematica::gateway::{Gateway, ModelProfile, RetryPolicy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/interviews/interview_01.txt");
    let manifest = corpus::ingest(
        &[path],
        &CleaningRules::interview_defaults(),
        ChunkBounds::new(60, 120)?,
    )?;

    let mock = Arc::new(MockBackend::new(7).with_responder(SyntheticResponder));
    let gateway = Gateway::new(mock.clone(), ModelProfile::default()).with_retry(RetryPolicy::immediate(3));
    let out = coding::code_corpus(&manifest, &KindSpec::defaults(), &gateway, &CodingOptions::default())?;

    println!(
        "{} chunks, {} requests",
        manifest.chunks.len(),
        mock.transmitted().len()
    );
    for (kind, codes) in &out.codes {
        println!("\n{kind}: {} codes", codes.len());
        for c in codes.iter().take(3) {
            println!("  {} {}: \"{}\"", c.code_id, c.name, c.quote);
        }
    }
    println!("\nprovenance flags: {}", out.report.provenance_flags.len());
    Ok(())
}
