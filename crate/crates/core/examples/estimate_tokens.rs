//! Size text with the conservative estimator and check it against a prompt
//! budget.
//!
//!     cargo run --example estimate_tokens [file]

use std::path::Path;

use thematica::gateway::{HeuristicEstimator, ModelProfile, TokenEstimator};

fn main() -> std::io::Result<()> {
    let est = HeuristicEstimator::default();
    let profile = ModelProfile::default();
    let files: Vec<_> = match std::env::args().nth(1) {
        Some(f) => vec![f.into()],
        None => {
            let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/calibration");
            let mut v: Vec<_> = std::fs::read_dir(dir)?.flatten().map(|e| e.path()).collect();
            v.retain(|p| p.extension().is_some_and(|e| e == "txt"));
            v.sort();
            v
        }
    };
    println!(
        "capacity {} prompt tokens ({} limit, {} reserved)",
        profile.prompt_capacity(),
        profile.context_limit,
        profile.response_reserve
    );
    for path in files {
        let text = std::fs::read_to_string(&path)?;
        let n = est.estimate(&text);
        println!(
            "{:<28} {:>6} chars {:>6} tokens  {:>5.1}% of capacity",
            path.file_name().unwrap().to_string_lossy(),
            text.chars().count(),
            n,
            100.0 * n as f64 / profile.prompt_capacity() as f64
        );
    }
    Ok(())
}
