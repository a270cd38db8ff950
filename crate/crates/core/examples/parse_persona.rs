//! Parse a persona document and render it as plain text.
//!
//!     cargo run --example parse_persona [file]

use std::path::PathBuf;

use thematica::persona::{self, RenderFormat};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/persona_example_1.md"));
    let text = std::fs::read_to_string(&path)?;
    let parsed = persona::parse_persona(&text, "example")?;
    print!("{}", persona::render_persona(&parsed.persona, RenderFormat::PlainText));
    for flag in &parsed.flags {
        println!("flag: {flag}");
    }
    Ok(())
}
