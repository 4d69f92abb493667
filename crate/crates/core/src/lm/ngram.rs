use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::{LogitSource, LogitVector};
use crate::corpus::{TokenId, TokenSequence, Vocabulary, BOS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NGramConfig {
    pub order: usize,
    /// Weight on the maximum-likelihood estimate at each context length.
    pub alpha: f64,
    /// Additive floor applied to every token before renormalizing.
    pub epsilon: f64,
}

impl Default for NGramConfig {
    fn default() -> Self {
        Self {
            order: 3,
            alpha: 0.7,
            epsilon: 1e-6,
        }
    }
}

impl NGramConfig {
    pub fn with_order(order: usize) -> Self {
        Self {
            order,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::InvalidParameter("order must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ContextCounts {
    total: u64,
    /// Sorted by token id.
    next: Vec<(TokenId, u64)>,
}

/// Jelinek-Mercer interpolated n-gram model over a fixed vocabulary.
///
/// `P_0(w)` is the unigram ML estimate. For each longer context `h_j` seen
/// in training, `P_j(w | h_j) = alpha * ML(w | h_j) + (1 - alpha) * P_{j-1}`;
/// unseen contexts fall through to the shorter one. The reported
/// distribution is `(P + epsilon) / (1 + |V| * epsilon)`, so every token has
/// a finite logit.
#[derive(Debug, Clone)]
pub struct NGramModel {
    vocab: Vocabulary,
    config: NGramConfig,
    unigram_counts: Vec<u64>,
    unigram: Vec<f64>,
    /// `levels[j - 1]` maps length-`j` contexts to their continuation counts.
    levels: Vec<HashMap<Vec<TokenId>, ContextCounts>>,
}

/// Counts every transition in `corpus` (sequences are expected to carry
/// their own `<s>`/`</s>` markers; `<s>` itself is never predicted).
pub fn train_ngram(vocab: &Vocabulary, corpus: &[TokenSequence], config: NGramConfig) -> Result<NGramModel> {
    config.validate()?;
    let v = vocab.len();
    let mut unigram_counts = vec![0u64; v];
    let mut raw: Vec<HashMap<Vec<TokenId>, BTreeMap<TokenId, u64>>> = vec![HashMap::new(); config.order - 1];
    let mut seen = 0u64;
    for seq in corpus {
        vocab.check(seq)?;
        for i in 0..seq.len() {
            let w = seq[i];
            if i == 0 && w == BOS {
                continue;
            }
            unigram_counts[w as usize] += 1;
            seen += 1;
            for j in 1..config.order {
                if j > i {
                    break;
                }
                *raw[j - 1]
                    .entry(seq[i - j..i].to_vec())
                    .or_default()
                    .entry(w)
                    .or_default() += 1;
            }
        }
    }
    if seen == 0 {
        return Err(Error::EmptyCorpus);
    }
    let levels = raw
        .into_iter()
        .map(|level| {
            level
                .into_iter()
                .map(|(ctx, next)| {
                    let total = next.values().sum();
                    (
                        ctx,
                        ContextCounts {
                            total,
                            next: next.into_iter().collect(),
                        },
                    )
                })
                .collect()
        })
        .collect();
    Ok(NGramModel::assemble(
        vocab.clone(),
        config,
        unigram_counts,
        levels,
    ))
}

impl NGramModel {
    fn assemble(
        vocab: Vocabulary,
        config: NGramConfig,
        unigram_counts: Vec<u64>,
        levels: Vec<HashMap<Vec<TokenId>, ContextCounts>>,
    ) -> Self {
        let n: u64 = unigram_counts.iter().sum();
        let unigram = unigram_counts.iter().map(|&c| c as f64 / n as f64).collect();
        Self {
            vocab,
            config,
            unigram_counts,
            unigram,
            levels,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn config(&self) -> NGramConfig {
        self.config
    }

    pub fn order(&self) -> usize {
        self.config.order
    }

    /// Next-token probabilities after `prefix`.
    pub fn probabilities(&self, prefix: &[TokenId]) -> Vec<f64> {
        let alpha = self.config.alpha;
        let mut weight = 1.0;
        let mut sparse: Vec<(f64, &ContextCounts)> = Vec::with_capacity(self.levels.len());
        for j in (1..self.config.order).rev() {
            if j > prefix.len() {
                continue;
            }
            if let Some(cc) = self.levels[j - 1].get(&prefix[prefix.len() - j..]) {
                sparse.push((alpha * weight, cc));
                weight *= 1.0 - alpha;
            }
        }
        let mut p: Vec<f64> = self.unigram.iter().map(|u| weight * u).collect();
        for (w, cc) in sparse {
            let scale = w / cc.total as f64;
            for &(id, c) in &cc.next {
                p[id as usize] += scale * c as f64;
            }
        }
        let eps = self.config.epsilon;
        let norm = 1.0 + p.len() as f64 * eps;
        for x in &mut p {
            *x = (*x + eps) / norm;
        }
        p
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        serde_json::to_writer(&mut enc, &self.to_file()).map_err(|e| Error::json(path, e))?;
        enc.finish()
            .and_then(|mut w| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        GzDecoder::new(BufReader::new(file))
            .read_to_string(&mut text)
            .map_err(|e| Error::io(path, e))?;
        let parsed: ModelFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_file(parsed)
    }

    fn to_file(&self) -> ModelFile {
        let levels = self
            .levels
            .iter()
            .map(|level| {
                let mut rows: Vec<ContextRow> = level
                    .iter()
                    .map(|(ctx, cc)| ContextRow {
                        context: ctx.clone(),
                        next: cc.next.clone(),
                    })
                    .collect();
                rows.sort_by(|a, b| a.context.cmp(&b.context));
                rows
            })
            .collect();
        ModelFile {
            config: self.config,
            vocabulary: serde_json::from_str(&self.vocab.to_json()).expect("vocab json"),
            unigram: self.unigram_counts.clone(),
            levels,
        }
    }

    fn from_file(file: ModelFile) -> Result<Self> {
        file.config.validate()?;
        let vocab = Vocabulary::from_json(&file.vocabulary.to_string())?;
        if file.unigram.len() != vocab.len() || file.levels.len() + 1 != file.config.order {
            return Err(Error::MalformedResponse(
                "model tables do not match vocabulary/order".into(),
            ));
        }
        let levels = file
            .levels
            .into_iter()
            .map(|rows| {
                rows.into_iter()
                    .map(|r| {
                        let total = r.next.iter().map(|(_, c)| c).sum();
                        (r.context, ContextCounts { total, next: r.next })
                    })
                    .collect()
            })
            .collect();
        Ok(Self::assemble(vocab, file.config, file.unigram, levels))
    }
}

impl LogitSource for NGramModel {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
        Ok(LogitVector(
            self.probabilities(prefix).into_iter().map(f64::ln).collect(),
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config: NGramConfig,
    vocabulary: serde_json::Value,
    unigram: Vec<u64>,
    levels: Vec<Vec<ContextRow>>,
}

#[derive(Serialize, Deserialize)]
struct ContextRow {
    context: Vec<TokenId>,
    next: Vec<(TokenId, u64)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::log_softmax;

    fn model(docs: &[&str], order: usize) -> NGramModel {
        let vocab = Vocabulary::build(docs, 1).unwrap();
        let corpus: Vec<_> = docs.iter().map(|d| vocab.encode_document(d)).collect();
        train_ngram(&vocab, &corpus, NGramConfig::with_order(order)).unwrap()
    }

    #[test]
    fn repeated_bigram_dominates() {
        let m = model(&["a a a", "b"], 2);
        let a = m.vocab().id("a").unwrap();
        let p = m.probabilities(&[BOS, a]);
        for (id, &q) in p.iter().enumerate() {
            if id != a as usize {
                assert!(p[a as usize] > q);
            }
        }
    }

    #[test]
    fn unigram_ignores_prefix() {
        let m = model(&["a b c", "c b a a"], 1);
        let a = m.next_logits(&[]).unwrap();
        let b = m.next_logits(&[BOS, 3, 4, 5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distribution_normalizes_and_stays_positive() {
        let m = model(&["the cat sat on the mat", "the dog sat"], 3);
        for prefix in [vec![], vec![BOS], vec![BOS, 3, 4], vec![7, 7, 7]] {
            let p = m.probabilities(&prefix);
            let s: f64 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| x > 0.0));
            let ls = log_softmax(&m.next_logits(&prefix).unwrap());
            let s2: f64 = ls.iter().map(|x| x.exp()).sum();
            assert!((s2 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_training_corpus() {
        let vocab = Vocabulary::build(&["a"], 1).unwrap();
        assert!(matches!(
            train_ngram(&vocab, &[], NGramConfig::default()),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            train_ngram(&vocab, &[vec![BOS].into()], NGramConfig::default()),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn bad_config_rejected() {
        let vocab = Vocabulary::build(&["a"], 1).unwrap();
        let corpus = [vocab.encode_document("a")];
        for cfg in [
            NGramConfig::with_order(0),
            NGramConfig {
                alpha: 1.0,
                ..NGramConfig::default()
            },
            NGramConfig {
                epsilon: 0.0,
                ..NGramConfig::default()
            },
        ] {
            assert!(train_ngram(&vocab, &corpus, cfg).is_err());
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let m = model(&["the cat sat on the mat", "the dog sat"], 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json.gz");
        m.save(&path).unwrap();
        let back = NGramModel::load(&path).unwrap();
        assert_eq!(back.probabilities(&[BOS, 3]), m.probabilities(&[BOS, 3]));
        let path2 = dir.path().join("m2.json.gz");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
