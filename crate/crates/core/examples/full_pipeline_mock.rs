//! Run every stage offline and print the manifest report.
//!
//!     cargo run --example full_pipeline_mock [run_dir]

use std::path::{Path, PathBuf};

use thematica::pipeline::{self, BackendChoice, PipelineConfig, Runner};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = PipelineConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/fixture-run.toml"))?;
    let scratch = tempfile::tempdir()?;
    let run_dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| scratch.path().to_path_buf());
    let mut runner = Runner::open(config, &run_dir, BackendChoice::Mock, false)?;
    runner.run_all()?;
    print!("{}", pipeline::report(runner.manifest()));
    let persona = std::fs::read_to_string(run_dir.join("05-personas/persona-01.md"))?;
    println!("\n{persona}");
    Ok(())
}
