//! Clean and chunk the bundled interview transcripts.
//!
//!     cargo run --example ingest_and_chunk [min_words max_words]

use std::path::Path;

use thematica::corpus::{self, ChunkBounds, CleaningRules};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (min, max) = match args[..] {
        [min, max] => (min, max),
        _ => (120, 360),
    };
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/interviews");
    let paths: Vec<_> = std::fs::read_dir(&dir)?.flatten().map(|e| e.path()).collect();

    let manifest = corpus::ingest(
        &paths,
        &CleaningRules::interview_defaults(),
        ChunkBounds::new(min, max)?,
    )?;
    for interview in &manifest.interviews {
        let words: Vec<usize> = manifest
            .chunks_of(&interview.interview_id)
            .map(|c| c.word_count)
            .collect();
        println!("{:<14} {} chunks {:?}", interview.interview_id, words.len(), words);
    }
    let first = &manifest.chunks[0];
    println!(
        "\n{} begins: {}",
        first.chunk_id,
        first.text.chars().take(160).collect::<String>()
    );
    Ok(())
}
