//! Write the bundled corpus and task files to a directory (default `data/`).
//!
//!     cargo run --release --example write_bundled_data -- data

use std::path::PathBuf;

use inkmark::bundled::bundled;

fn main() -> inkmark::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| PathBuf::from("data"), PathBuf::from);
    let bundle = bundled();
    bundle.write(&dir)?;
    println!(
        "{} documents and {} tasks written to {}",
        bundle.documents.len(),
        bundle.tasks.len(),
        dir.display()
    );
    for t in &bundle.tasks {
        println!(
            "  {:<10} {:>4} examples ({})",
            t.name,
            t.examples.len(),
            t.category()?
        );
    }
    Ok(())
}
