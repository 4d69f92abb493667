//! Sampled statistics of the semantic partition and of calibration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use inkmark::bundled::bundled;
use inkmark::calibrate::{
    calibrate, corpus_perplexity, tpr_for_delta, unwatermarked_negatives, CalibrationOptions, Intensity,
    IntensityTarget,
};
use inkmark::corpus::split_corpus;
use inkmark::detect::{z_scores, Detector};
use inkmark::watermark::sir_partition;
use inkmark::{LogitSource, Scheme, TokenId, WatermarkSpec, Watermarker};

#[test]
fn semantic_partition_is_balanced_and_stable() {
    let v = 600;
    let spec = WatermarkSpec::sir(2.0, 2024).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut fraction = 0.0;
    let mut agreement = 0.0;
    let n = 1000;
    for _ in 0..n {
        let len = rng.gen_range(16..40);
        let prefix: Vec<TokenId> = (0..len).map(|_| rng.gen_range(3..v as TokenId)).collect();
        let p = sir_partition(&spec, &prefix, v).unwrap();
        fraction += p.green_fraction();
        let mut perturbed = prefix.clone();
        *perturbed.last_mut().unwrap() = rng.gen_range(3..v as TokenId);
        let q = sir_partition(&spec, &perturbed, v).unwrap();
        let same = (0..v as TokenId)
            .filter(|&t| p.is_green(t) == q.is_green(t))
            .count();
        agreement += same as f64 / v as f64;
    }
    let fraction = fraction / n as f64;
    let agreement = agreement / n as f64;
    assert!(
        (0.45..=0.55).contains(&fraction),
        "mean green fraction {fraction}"
    );
    assert!(agreement >= 0.7, "mean agreement {agreement}");
}

#[test]
fn detection_rate_and_perplexity_grow_with_the_boost() {
    let bundle = bundled();
    let model = bundle.train(3).unwrap();
    let split = split_corpus(&bundle.documents, model.vocab(), 300, 100, 12)
        .unwrap()
        .truncate_prefixes(8)
        .truncate_snippets(64);
    let target = IntensityTarget::from(Intensity::Moderate);
    for scheme in Scheme::ALL {
        let template = WatermarkSpec::new(scheme, 0.25, 0.0, 31).unwrap();
        let w0 = Watermarker::new(template, model.vocab_size()).unwrap();
        let negatives = unwatermarked_negatives(&model, &split.calibration_prefixes, 50, 13).unwrap();
        let neg = z_scores(&negatives, &w0, Detector::for_scheme(scheme), Some(&model)).unwrap();
        let mut last = (f64::NEG_INFINITY, 0.0);
        for delta in [0.0, 2.0, 4.0, 8.0] {
            let tpr = tpr_for_delta(
                &model,
                &template,
                delta,
                &target,
                &split.calibration_prefixes,
                &neg,
                14,
            )
            .unwrap();
            let w = Watermarker::new(template.with_delta(delta), model.vocab_size()).unwrap();
            let ppl = corpus_perplexity(&model, Some(&w), &split.perplexity_snippets).unwrap();
            assert!(
                tpr >= last.0 - 0.03,
                "{scheme}: TPR fell to {tpr} at delta {delta}"
            );
            assert!(
                ppl >= last.1,
                "{scheme}: perplexity fell to {ppl} at delta {delta}"
            );
            last = (tpr, ppl);
        }
    }
}

#[test]
fn calibration_is_reproducible_and_hits_its_target() {
    let bundle = bundled();
    let model = bundle.train(3).unwrap();
    let split = split_corpus(&bundle.documents, model.vocab(), 80, 30, 21)
        .unwrap()
        .truncate_prefixes(8)
        .truncate_snippets(64);
    let options = CalibrationOptions {
        seed: 22,
        ..Default::default()
    };
    let run = || {
        calibrate(
            &model,
            Scheme::Kgw,
            23,
            Intensity::Light,
            &[0.25, 0.5],
            &split.calibration_prefixes,
            &split.perplexity_snippets,
            &options,
        )
        .unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    let chosen = a.per_gamma.iter().find(|o| o.gamma == a.chosen.gamma).unwrap();
    let tpr = chosen.achieved_tpr.unwrap();
    assert!(
        (tpr - 0.5).abs() <= 0.05 || tpr > 0.5,
        "achieved TPR {tpr} for the light target"
    );
}
