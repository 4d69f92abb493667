//! Score watermarked and unwatermarked generations with the plain z-test and
//! the entropy-weighted variant, then read TPR off the ROC at 1% FPR.
//!
//!     cargo run --release --example detect_zscore

use inkmark::bundled::bundled;
use inkmark::calibrate::{sample_continuations, unwatermarked_negatives};
use inkmark::corpus::split_corpus;
use inkmark::detect::{empirical_roc, Detector};
use inkmark::watermark::{WatermarkSpec, Watermarker};
use inkmark::LogitSource;

fn main() -> inkmark::Result<()> {
    let bundle = bundled();
    let model = bundle.train(3)?;
    let split = split_corpus(&bundle.documents, model.vocab(), 200, 0, 1)?.truncate_prefixes(8);
    let prompts = &split.calibration_prefixes;
    let negatives = unwatermarked_negatives(&model, prompts, 50, 7)?;

    println!("{:>6} {:>10} {:>10}", "delta", "plain", "weighted");
    for delta in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let wm = Watermarker::new(WatermarkSpec::ewd(0.25, delta, 11)?, model.vocab_size())?;
        let positives = sample_continuations(&model, Some(&wm), prompts, 50, 8)?;
        let plain = empirical_roc(&positives, &negatives, &wm, Detector::Plain, None)?;
        let weighted = empirical_roc(&positives, &negatives, &wm, Detector::Ewd, Some(&model))?;
        println!(
            "{delta:>6.1} {:>10.3} {:>10.3}",
            plain.tpr_at_fpr(0.01),
            weighted.tpr_at_fpr(0.01)
        );
    }
    Ok(())
}
