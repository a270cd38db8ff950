//! Merge near-duplicate codes and print the merge log.
//!
//!     cargo run --example reduce_codebook [threshold]

use thematica::codebook;
use thematica::coding::{Code, CodeKind, Provenance};

fn code(i: usize, name: &str, quote: &str) -> Code {
    Code {
        code_id: format!("goals-c{i:03}"),
        kind: CodeKind::Goal,
        name: name.into(),
        description: format!("Interviewee mentions {}.", name.to_lowercase()),
        quote: quote.into(),
        provenance: vec![Provenance {
            interview_id: format!("interview_0{}", i % 3 + 1),
            chunk_id: format!("interview_0{}-c{i:03}", i % 3 + 1),
        }],
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let threshold = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(codebook::DEFAULT_SIMILARITY_THRESHOLD);
    let raw = vec![
        code(
            0,
            "Reliable weather forecasts",
            "I check the forecast before every spray.",
        ),
        code(1, "Reliable weather forecast", "The app tells me when rain is coming."),
        code(2, "reliable weather forecasts.", "Forecasts decide my week."),
        code(3, "Fair market prices", "We just want a fair price for the milk."),
        code(4, "Fair market price", "The co-op sets the price and we take it."),
        code(5, "Less paperwork", "The subsidy forms take me days."),
    ];
    let book = codebook::reduce_with_threshold(&raw, threshold)?;
    print!("{}", codebook::render_merge_log(&book));
    for e in &book.entries {
        println!("{:<30} {} quotes", e.name, e.quotes.len());
    }
    Ok(())
}
