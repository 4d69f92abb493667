//! Full run: train, calibrate all schemes, evaluate, analyze and report.
//!
//!     cargo run --release --example end_to_end -- /tmp/inkmark-run

use std::path::PathBuf;

use inkmark::pipeline::{cmd_pipeline, RunConfig};

fn main() -> inkmark::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| PathBuf::from("run"), PathBuf::from);
    let config = RunConfig {
        out_dir: out,
        seed: 17,
        ..RunConfig::default()
    };
    let outcome = cmd_pipeline(&config, None)?;
    if let Some(summary) = outcome.summary {
        print!("{}", summary.markdown);
    }
    Ok(())
}
