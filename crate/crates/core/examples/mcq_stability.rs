//! How often a watermark leaves the top-k option ranking untouched, for
//! short and long options and by option length.
//!
//!     cargo run --release --example mcq_stability

use inkmark::analysis::{mcq_rankings, LengthBucket, TopKMatch};
use inkmark::bundled::{bundled, MCQ_BUCKET_EDGES};
use inkmark::WatermarkSpec;

fn main() -> inkmark::Result<()> {
    let bundle = bundled();
    let model = bundle.train(3)?;
    let spec = WatermarkSpec::kgw(0.25, 2.0, 77)?;
    for name in ["mcq_short", "mcq_long"] {
        let r = mcq_rankings(
            &model,
            model.vocab(),
            &spec,
            bundle.task(name).expect("bundled task"),
        )?;
        for row in r.stability(&[1, 2, 3])? {
            println!(
                "{name:>9} k={} {:<5} unchanged {:.3} (random {:.3})",
                row.k,
                row.matching.name(),
                row.proportion_unchanged,
                row.random_permutation_baseline
            );
        }
    }
    let mixed = mcq_rankings(
        &model,
        model.vocab(),
        &spec,
        bundle.task("mcq_mixed").expect("bundled task"),
    )?;
    let buckets = LengthBucket::from_edges(MCQ_BUCKET_EDGES);
    for row in mixed.stability_by_length(&buckets, 1, TopKMatch::Order)? {
        println!(
            "words [{}, {}): {} items, top-1 unchanged {:.3}",
            row.min_words, row.max_words, row.examples, row.proportion_unchanged
        );
    }
    Ok(())
}
