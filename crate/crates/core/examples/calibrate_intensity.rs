//! Calibrate each scheme to the three intensity targets and print the chosen
//! green fraction, boost and perplexity.
//!
//!     cargo run --release --example calibrate_intensity

use inkmark::bundled::bundled;
use inkmark::calibrate::{calibrate, CalibrationOptions, Intensity, GAMMA_GRID};
use inkmark::corpus::split_corpus;
use inkmark::Scheme;

fn main() -> inkmark::Result<()> {
    let bundle = bundled();
    let model = bundle.train(3)?;
    let split = split_corpus(&bundle.documents, model.vocab(), 100, 50, 3)?
        .truncate_prefixes(8)
        .truncate_snippets(64);
    let options = CalibrationOptions {
        seed: 5,
        ..Default::default()
    };
    for intensity in Intensity::ALL {
        for scheme in Scheme::ALL {
            let r = calibrate(
                &model,
                scheme,
                1234,
                intensity,
                &GAMMA_GRID,
                &split.calibration_prefixes,
                &split.perplexity_snippets,
                &options,
            )?;
            println!(
                "{intensity:>8} {scheme}: gamma={:.2} delta={:.3} ppl={:.3}",
                r.chosen.gamma, r.chosen.delta, r.chosen.perplexity
            );
        }
    }
    Ok(())
}
