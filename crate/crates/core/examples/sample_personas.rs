//! Draw theme selections and write personas with the mock backend.
//!
//!     cargo run --example sample_personas [count]

use std::collections::BTreeMap;
use std::path::Path;

use thematica::coding::CodeKind;
use thematica::persona;
use thematica::pipeline::{BackendChoice, PipelineConfig, Runner, Stage};
use thematica::themes::ThemeSet;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let count: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let config = PipelineConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/fixture-run.toml"))?;
    let dir = tempfile::tempdir()?;
    let mut runner = Runner::open(config, dir.path(), BackendChoice::Mock, false)?;
    for stage in [Stage::Ingest, Stage::Code, Stage::Reduce, Stage::Themes] {
        runner.run_stage(stage)?;
    }

    let mut sets = BTreeMap::new();
    for kind in CodeKind::ALL {
        let path = dir.path().join(format!("04-themes/themes-{}.json", kind.tag()));
        let set: ThemeSet = serde_json::from_slice(&std::fs::read(path)?)?;
        sets.insert(kind, set);
    }
    let seeds: Vec<u64> = (0..count).collect();
    let gateway = runner.gateway();
    for result in persona::generate_personas(&sets, &seeds, gateway, persona::DEFAULT_MAX_DRAWS, 2) {
        match result {
            Ok(a) => println!(
                "{} {} ({}, {:?}) from {} at {} tokens",
                a.persona_id,
                a.persona.name,
                a.persona.country,
                a.persona.age_band,
                a.selection.selection_id,
                a.selection.estimated_prompt_tokens
            ),
            Err(e) => println!("failed: {e}"),
        }
    }
    Ok(())
}
