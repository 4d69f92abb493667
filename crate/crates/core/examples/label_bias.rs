//! Enumerate every green/red assignment of the label tokens of the bundled
//! classification tasks and compare the expectation with a sampled estimate
//! over random keys.
//!
//!     cargo run --release --example label_bias

use inkmark::analysis::{
    enumerate_from_logits, label_position_logits, probability_of_random_collapse, sampled_expected_accuracy,
    COLLAPSE_TOLERANCE,
};
use inkmark::bundled::bundled;
use inkmark::taskeval::random_baseline;
use inkmark::LogitSource;

fn main() -> inkmark::Result<()> {
    let bundle = bundled();
    let model = bundle.train(3)?;
    for name in ["yesno", "verdict"] {
        let task = bundle.task(name).expect("bundled task");
        let table = label_position_logits(&model, model.vocab(), task)?;
        let baseline = random_baseline(&task.examples)?;
        println!(
            "{name} (labels {:?}, random {:.3})",
            task.examples[0].labels, baseline
        );
        for delta in [1.0, 3.0, 5.0] {
            let e = enumerate_from_logits(&table, baseline, delta, 0.25)?;
            let sampled = sampled_expected_accuracy(&table, model.vocab_size(), delta, 0.25, 2000, 9)?;
            let collapse = probability_of_random_collapse(&e.outcomes, baseline, COLLAPSE_TOLERANCE)?;
            println!(
                "  delta {delta}: unwatermarked {:.3} expected {:.3} (sampled {:.3}) worst {:.3} P(collapse) {:.3}",
                e.unwatermarked_accuracy, e.expected_accuracy, sampled, e.worst_accuracy, collapse
            );
        }
    }
    Ok(())
}
