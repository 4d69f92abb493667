//! Short-answer generation under a watermark: once the top-1 logit margin
//! exceeds the boost, greedy answers cannot change.
//!
//!     cargo run --release --example sgen_margin

use inkmark::bundled::bundled;
use inkmark::lm::Sharpened;
use inkmark::taskeval::{evaluate_task, logit_margin_profile};
use inkmark::{LogitSource, WatermarkSpec, Watermarker};

fn main() -> inkmark::Result<()> {
    let bundle = bundled();
    let model = bundle.train(3)?;
    let vocab = model.vocab().clone();
    let facts = bundle.task("facts").expect("bundled task");
    let prompts: Vec<_> = facts
        .examples
        .iter()
        .map(|e| vocab.encode_prompt(&e.prompt))
        .collect();

    let profile = logit_margin_profile(&model, &prompts, 2, 5)?;
    println!("mean sorted logits at answer steps: {profile:.2?}");

    let sharp = Sharpened {
        inner: &model,
        margin: 20.0,
    };
    for delta in [2.0, 8.0, 25.0] {
        let wm = Watermarker::new(WatermarkSpec::kgw(0.25, delta, 3)?, model.vocab_size())?;
        let base = evaluate_task(&model, Some(&wm), &vocab, facts)?;
        let sharpened = evaluate_task(&sharp, Some(&wm), &vocab, facts)?;
        println!(
            "delta {delta:>4}: F1 {:.3} on the trained model, {:.3} with a margin-20 model",
            base.raw, sharpened.raw
        );
    }
    Ok(())
}
