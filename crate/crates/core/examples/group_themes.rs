//! Build codebooks from the fixture corpus and group them into themes.
//!
//!     cargo run --example group_themes

use std::path::Path;

use thematica::pipeline::{BackendChoice, PipelineConfig, Runner, Stage};
use thematica::themes::{self, ThemeSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = PipelineConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/fixture-run.toml"))?;
    let dir = tempfile::tempdir()?;
    let mut runner = Runner::open(config, dir.path(), BackendChoice::Mock, false)?;
    for stage in [Stage::Ingest, Stage::Code, Stage::Reduce, Stage::Themes] {
        runner.run_stage(stage)?;
    }
    let budget = runner.theme_budget();
    println!("theme budget: {budget} tokens\n");
    for tag in ["behaviours", "frustrations", "goals", "traits"] {
        let set: ThemeSet =
            serde_json::from_slice(&std::fs::read(dir.path().join(format!("04-themes/themes-{tag}.json")))?)?;
        println!("{tag}: {} themes", set.base_theme_count());
        for t in set.themes.iter().take(3) {
            let est = runner.gateway().estimate_tokens(&themes::serialize_theme(t));
            println!("  {} {} ({} codes, {est} tokens)", t.theme_id, t.name, t.members.len());
        }
    }
    Ok(())
}
