//! Generate the same prompts with and without a KGW watermark and show the
//! share of green tokens in each.
//!
//!     cargo run --release --example watermark_generate

use inkmark::bundled::bundled;
use inkmark::watermark::{watermarked_generate, GenerateOptions, WatermarkSpec, Watermarker};
use inkmark::LogitSource;

fn main() -> inkmark::Result<()> {
    let bundle = bundled();
    let model = bundle.train(3)?;
    let vocab = model.vocab();
    let wm = Watermarker::new(WatermarkSpec::kgw(0.25, 3.0, 42)?, model.vocab_size())?;

    for (i, doc) in bundle.documents.iter().take(3).enumerate() {
        let mut prompt = vocab.encode_prompt(doc).into_inner();
        prompt.truncate(6);
        let opts = GenerateOptions::sampled(40, i as u64);
        let plain = watermarked_generate(&model, None, &prompt, &opts)?;
        let marked = watermarked_generate(&model, Some(&wm), &prompt, &opts)?;
        // score the plain text against the same key for comparison
        let plain_green = inkmark::detect::count_green_from(&plain.tokens, plain.prompt_len, &wm)?;
        println!("prompt:  {}", vocab.detokenize(&prompt));
        println!(
            "  plain  ({:>2}/{} green) {}",
            plain_green.green_count,
            plain_green.scored_length,
            vocab.detokenize(plain.output())
        );
        println!(
            "  marked ({:>2}/{} green) {}",
            marked.green_count(),
            marked.output().len(),
            vocab.detokenize(marked.output())
        );
    }
    Ok(())
}
