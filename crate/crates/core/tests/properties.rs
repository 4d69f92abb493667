//! Invariants of the language model, partitions, bias and detectors.

use std::sync::OnceLock;

use proptest::prelude::*;

use inkmark::bundled::{bundled, Bundle};
use inkmark::corpus::{build_vocabulary, BOS};
use inkmark::detect::{count_green_from, detect, weighted_z_score, z_score, Detector, Roc};
use inkmark::lm::{entropy_at, perplexity, softmax, train_ngram, FnSource};
use inkmark::watermark::{apply_bias, kgw_partition, watermarked_generate, GenerateOptions, Partition};
use inkmark::{LogitSource, NGramConfig, NGramModel, Scheme, TokenId, WatermarkSpec, Watermarker};

fn shared() -> &'static (Bundle, NGramModel) {
    static CELL: OnceLock<(Bundle, NGramModel)> = OnceLock::new();
    CELL.get_or_init(|| {
        let b = bundled();
        let m = b.train(3).unwrap();
        (b, m)
    })
}

fn prefix_strategy() -> impl Strategy<Value = Vec<TokenId>> {
    let v = shared().1.vocab_size() as TokenId;
    prop::collection::vec(3..v, 0..12).prop_map(|mut p| {
        p.insert(0, BOS);
        p
    })
}

fn gamma_strategy() -> impl Strategy<Value = f64> {
    prop::sample::select(vec![0.1, 0.25, 0.5, 0.75])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_sums_to_one(prefix in prefix_strategy()) {
        let probs = shared().1.next_logits(&prefix).unwrap().softmax();
        let total: f64 = probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(probs.iter().all(|p| *p > 0.0));
    }

    #[test]
    fn entropy_is_bounded(prefix in prefix_strategy()) {
        let model = &shared().1;
        let h = entropy_at(model, &prefix).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (model.vocab_size() as f64).ln() + 1e-9);
    }

    #[test]
    fn zero_delta_keeps_perplexity(prefix in prefix_strategy(), key in any::<u64>(), scheme in 0usize..3) {
        prop_assume!(prefix.len() >= 2);
        let model = &shared().1;
        let spec = WatermarkSpec::new(Scheme::ALL[scheme], 0.25, 0.0, key).unwrap();
        let w = Watermarker::new(spec, model.vocab_size()).unwrap();
        let bare = perplexity(model, &prefix, None).unwrap();
        let marked = perplexity(model, &prefix, Some(&w)).unwrap();
        prop_assert_eq!(bare, marked);
    }

    #[test]
    fn boost_never_lowers_green_mass(
        prefix in prefix_strategy(),
        key in any::<u64>(),
        gamma in gamma_strategy(),
        delta in 0.0f64..10.0,
    ) {
        let model = &shared().1;
        let logits = model.next_logits(&prefix).unwrap();
        let w = Watermarker::new(WatermarkSpec::kgw(gamma, delta, key).unwrap(), model.vocab_size()).unwrap();
        let p = w.partition(&prefix).unwrap();
        let mass = |probs: &[f64]| -> f64 {
            probs.iter().enumerate().filter(|(i, _)| p.is_green(*i as TokenId)).map(|(_, q)| q).sum()
        };
        let before = mass(&softmax(&logits));
        let after = mass(&softmax(&w.bias(&logits, &p).unwrap()));
        prop_assert!(after >= before - 1e-12);
    }

    #[test]
    fn partition_is_a_pure_function(
        key in any::<u64>(),
        gamma in 0.01f64..0.99,
        v in 2usize..3000,
        t in any::<u32>(),
    ) {
        let spec = WatermarkSpec::kgw(gamma, 1.0, key).unwrap();
        let last = t % v as u32;
        let a = kgw_partition(&spec, last, v).unwrap();
        let b = kgw_partition(&spec, last, v).unwrap();
        prop_assert_eq!(&a, &b);
        let green = (0..v as TokenId).filter(|&i| a.is_green(i)).count();
        prop_assert_eq!(green, (gamma * v as f64).floor() as usize);
    }

    #[test]
    fn bias_keeps_order_within_each_class(
        logits in prop::collection::vec(-20.0f64..20.0, 2..60),
        seed in any::<u64>(),
        delta in 0.0f64..12.0,
    ) {
        let mask: Vec<bool> = (0..logits.len()).map(|i| inkmark::hashing::keyed_hash(seed, i as u64) & 1 == 1).collect();
        let p = Partition::from_mask(mask.clone());
        let biased = apply_bias(&logits, &p, delta).unwrap();
        for i in 0..logits.len() {
            for j in 0..logits.len() {
                if mask[i] == mask[j] && logits[i] < logits[j] {
                    prop_assert!(biased[i] < biased[j]);
                }
                if mask[i] && !mask[j] && logits[i] >= logits[j] {
                    prop_assert!(biased[i] >= biased[j]);
                }
            }
        }
    }

    #[test]
    fn z_grows_with_green_count(len in 1usize..500, gamma in 0.01f64..0.99, g in 0usize..500) {
        prop_assume!(g < len);
        prop_assert!(z_score(g as f64 + 1.0, len, gamma) > z_score(g as f64, len, gamma));
    }

    #[test]
    fn constant_weights_reduce_to_plain_z(
        flags in prop::collection::vec(any::<bool>(), 1..300),
        gamma in 0.01f64..0.99,
        w in 0.001f64..50.0,
    ) {
        let weighted = weighted_z_score(&vec![w; flags.len()], &flags, gamma).unwrap();
        let green = flags.iter().filter(|f| **f).count() as f64;
        let plain = z_score(green, flags.len(), gamma);
        prop_assert!((weighted - plain).abs() <= 1e-9 * plain.abs().max(1.0));
    }

    #[test]
    fn roc_rates_fall_as_threshold_rises(
        pos in prop::collection::vec(-5.0f64..10.0, 1..80),
        neg in prop::collection::vec(-5.0f64..10.0, 1..80),
        a in -6.0f64..11.0,
        b in -6.0f64..11.0,
    ) {
        let roc = Roc::from_scores(&pos, &neg).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(roc.tpr(lo) >= roc.tpr(hi));
        prop_assert!(roc.fpr(lo) >= roc.fpr(hi));
        for target in [0.0, 0.01, 0.05, 0.1, 0.5] {
            prop_assert!(roc.at_fpr(target).fpr <= target + 1e-12);
        }
    }
}

#[test]
fn huge_boost_makes_greedy_output_all_green() {
    let model = &shared().1;
    for scheme in [Scheme::Kgw, Scheme::Ewd] {
        let spec = WatermarkSpec::new(scheme, 0.25, 50.0, 5).unwrap();
        let w = Watermarker::new(spec, model.vocab_size()).unwrap();
        for start in 3..23 {
            let g =
                watermarked_generate(model, Some(&w), &[BOS, start], &GenerateOptions::greedy(40)).unwrap();
            assert!(g.green.iter().all(|&x| x), "non-green token under delta 50");
        }
    }
}

#[test]
fn detector_recounts_the_generators_green_tokens() {
    let model = &shared().1;
    for (n, scheme) in Scheme::ALL.into_iter().enumerate() {
        let spec = WatermarkSpec::new(scheme, 0.25, 2.0, 100 + n as u64).unwrap();
        let w = Watermarker::new(spec, model.vocab_size()).unwrap();
        for seed in 0..30u64 {
            let opts = GenerateOptions::sampled(50, seed).fixed_length();
            let g = watermarked_generate(model, Some(&w), &[BOS, 3 + seed as TokenId], &opts).unwrap();
            let counted = count_green_from(&g.tokens, g.prompt_len, &w).unwrap();
            assert_eq!(counted.flags, g.green);
            let report = detect(
                &g.tokens,
                g.prompt_len,
                &w,
                Detector::for_scheme(scheme),
                Some(model),
                4.0,
            )
            .unwrap();
            assert_eq!(report.green_count, g.green_count());
            assert_eq!(report.scored_length, 50);
        }
    }
}

#[test]
fn tokenizer_round_trips_the_first_thousand_documents() {
    let docs = &shared().0.documents[..1000];
    let vocab = build_vocabulary(docs, 2).unwrap();
    for d in docs {
        assert_eq!(vocab.detokenize(vocab.tokenize(d).ids()), vocab.normalize(d));
    }
}

#[test]
fn vocabulary_is_a_function_of_documents_and_threshold() {
    let docs = &shared().0.documents;
    let a = build_vocabulary(docs, 2).unwrap();
    let b = build_vocabulary(docs, 2).unwrap();
    assert_eq!(a.tokens(), b.tokens());
    assert_eq!(a.hash(), b.hash());
    let mut reversed = docs.clone();
    reversed.reverse();
    assert_eq!(build_vocabulary(&reversed, 2).unwrap().hash(), a.hash());
}

#[test]
fn trigram_beats_unigram_on_held_out_text() {
    let docs = &shared().0.documents;
    let (train, test) = docs.split_at(docs.len() - 300);
    let vocab = build_vocabulary(train, 1).unwrap();
    let seqs: Vec<_> = train.iter().map(|d| vocab.encode_document(d)).collect();
    let held: Vec<_> = test.iter().map(|d| vocab.encode_document(d)).collect();
    let ppl = |order: usize| {
        let m = train_ngram(&vocab, &seqs, NGramConfig::with_order(order)).unwrap();
        let (nll, n) = held
            .iter()
            .map(|s| inkmark::lm::negative_log_likelihood(&m, s, None).unwrap())
            .fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
        (nll / n as f64).exp()
    };
    let (uni, tri) = (ppl(1), ppl(3));
    assert!(tri <= uni, "trigram {tri} vs unigram {uni}");
}

#[test]
fn uniform_source_has_vocabulary_size_perplexity_under_any_zero_boost() {
    let m = FnSource::new(9, |_: &[TokenId]| vec![1.5; 9]);
    let w = Watermarker::new(WatermarkSpec::sir(0.0, 1).unwrap(), 9).unwrap();
    let ppl = perplexity(&m, &[BOS, 4, 5, 6, 7], Some(&w)).unwrap();
    assert!((ppl - 9.0).abs() < 1e-12);
}
