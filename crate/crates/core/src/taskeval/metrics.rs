//! Task metrics: bag-of-tokens F1 and corpus-level BLEU.

use std::collections::HashMap;

use crate::corpus::split_words;
use crate::error::{Error, Result};

fn f1_tokens(text: &str) -> Vec<String> {
    split_words(text)
        .into_iter()
        .filter(|w| w.chars().all(char::is_alphanumeric))
        .collect()
}

fn bag(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn f1_pair(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() {
            1.0
        } else {
            0.0
        };
    }
    let p = bag(pred);
    let g = bag(gold);
    let common: usize = p
        .iter()
        .map(|(t, c)| (*c).min(g.get(t).copied().unwrap_or(0)))
        .sum();
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best bag-of-tokens F1 against any reference, after lowercasing and
/// dropping punctuation.
pub fn token_f1<S: AsRef<str>>(prediction: &str, references: &[S]) -> f64 {
    let pred = f1_tokens(prediction);
    references
        .iter()
        .map(|r| f1_pair(&pred, &f1_tokens(r.as_ref())))
        .fold(0.0, f64::max)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sufficient statistics of corpus BLEU.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..4 {
            let p = if n > 0 && self.matches[n] == 0 {
                1.0 / (self.totals[n] as f64 + 1.0)
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
            log_sum += p.ln();
        }
        let bp = if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        bp * (log_sum / 4.0).exp()
    }
}

/// Clipped 1-4-gram matches and lengths; the effective reference length
/// of each sentence is the closest reference length, shorter on ties.
pub fn bleu_stats<S: AsRef<str>>(predictions: &[S], references: &[Vec<S>]) -> Result<BleuStats> {
    if predictions.len() != references.len() {
        return Err(Error::LengthMismatch {
            expected: predictions.len(),
            actual: references.len(),
        });
    }
    let mut st = BleuStats::default();
    for (pred, refs) in predictions.iter().zip(references) {
        let hyp = split_words(pred.as_ref());
        let refs: Vec<Vec<String>> = refs.iter().map(|r| split_words(r.as_ref())).collect();
        st.hyp_len += hyp.len();
        st.ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let h = ngram_counts(&hyp, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            st.matches[n - 1] += h
                .iter()
                .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            st.totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    Ok(st)
}

/// Corpus BLEU with brevity penalty; zero-match precisions above unigrams
/// are smoothed to `1 / (total + 1)`.
pub fn corpus_bleu<S: AsRef<str>>(predictions: &[S], references: &[Vec<S>]) -> Result<f64> {
    Ok(bleu_stats(predictions, references)?.score())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("a b c", &["a b c"]), 1.0);
        assert_eq!(token_f1("a b c", &["x y"]), 0.0);
        assert_eq!(token_f1("a b c", &["a b d"]), 2.0 / 3.0);
        assert_eq!(token_f1("A, b!", &["a b"]), 1.0);
        assert_eq!(token_f1("x", &["a b d", "x"]), 1.0);
        assert_eq!(token_f1("", &[""]), 1.0);
        assert_eq!(token_f1("", &["a"]), 0.0);
    }

    #[test]
    fn bleu_identical_is_one() {
        let preds = ["the cat sat on the mat", "a dog"];
        let refs = vec![vec!["the cat sat on the mat"], vec!["a dog"]];
        assert!((corpus_bleu(&preds, &refs).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_empty_predictions() {
        let refs = vec![vec!["a b c"], vec!["d e"]];
        assert_eq!(corpus_bleu(&["", ""], &refs).unwrap(), 0.0);
    }

    #[test]
    fn bleu_hand_computed() {
        // p1 = 7/9, p2 = 4/7, p3 = 1/5, p4 smoothed (0+1)/(3+1), c = 9, r = 10
        let preds = ["the cat sat on the mat", "a dog runs"];
        let refs = vec![vec!["the cat is on the mat"], vec!["the dog runs fast"]];
        let st = bleu_stats(&preds, &refs).unwrap();
        assert_eq!(st.matches, [7, 4, 1, 0]);
        assert_eq!(st.totals, [9, 7, 5, 3]);
        assert_eq!((st.hyp_len, st.ref_len), (9, 10));
        let expected = (-1.0f64 / 9.0).exp() * (7.0 / 9.0 * 4.0 / 7.0 * 1.0 / 5.0 * 1.0 / 4.0f64).powf(0.25);
        assert!((st.score() - expected).abs() < 1e-9);
    }

    #[test]
    fn bleu_length_mismatch() {
        assert!(matches!(
            corpus_bleu(&["a"], &[]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn closest_reference_length_prefers_shorter_on_ties() {
        let st = bleu_stats(&["a b c"], &[vec!["a b", "a b c d"]]).unwrap();
        assert_eq!(st.ref_len, 2);
    }
}
