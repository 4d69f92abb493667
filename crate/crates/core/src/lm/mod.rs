//! Token-probability sources and the quantities derived from them.
//!
//! Everything downstream talks to a model through [`LogitSource`]. The
//! built-in [`NGramModel`] and the HTTP [`RemoteLogits`] client both
//! implement it, and [`Transformed`] layers a [`LogitTransform`] (a
//! watermark) on top of any source.

mod ngram;
mod remote;

use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use ngram::{train_ngram, NGramConfig, NGramModel};
pub use remote::{
    handle_logits_request, remote_logits, LogitsRequest, LogitsResponse, RemoteConfig, RemoteLogits,
    LOGITS_PATH, TOKEN_ENV, VOCAB_HASH_HEADER,
};

use crate::corpus::{TokenId, BOS};
use crate::error::{Error, Result};

/// Unnormalized log-odds over the whole vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector(pub Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn uniform(size: usize) -> Self {
        Self(vec![0.0; size])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn log_softmax(&self) -> Vec<f64> {
        log_softmax(&self.0)
    }

    pub fn softmax(&self) -> Vec<f64> {
        softmax(&self.0)
    }

    /// Index of the largest logit, lowest id on ties.
    pub fn argmax(&self) -> TokenId {
        argmax(&self.0) as TokenId
    }
}

impl Deref for LogitVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for LogitVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// First index of the maximum value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// A deterministic next-token logit oracle.
pub trait LogitSource: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Logits for the token following `prefix`. Identical prefixes must give
    /// identical vectors.
    fn next_logits(&self, prefix: &[TokenId]) -> Result<LogitVector>;
}

impl<T: LogitSource + ?Sized> LogitSource for &T {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
        (**self).next_logits(prefix)
    }
}

impl<T: LogitSource + ?Sized> LogitSource for Box<T> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
        (**self).next_logits(prefix)
    }
}

impl<T: LogitSource + ?Sized> LogitSource for Arc<T> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
        (**self).next_logits(prefix)
    }
}

/// A prefix-dependent rewrite of a logit vector.
pub trait LogitTransform: Send + Sync {
    fn transform(&self, prefix: &[TokenId], logits: &mut LogitVector) -> Result<()>;
}

/// A source whose every output passes through a transform.
pub struct Transformed<'a> {
    pub source: &'a dyn LogitSource,
    pub transform: &'a dyn LogitTransform,
}

impl<'a> Transformed<'a> {
    pub fn new(source: &'a dyn LogitSource, transform: &'a dyn LogitTransform) -> Self {
        Self { source, transform }
    }
}

impl LogitSource for Transformed<'_> {
    fn vocab_size(&self) -> usize {
        self.source.vocab_size()
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
        let mut logits = self.source.next_logits(prefix)?;
        self.transform.transform(prefix, &mut logits)?;
        Ok(logits)
    }
}

/// Wraps `source` in `transform` when one is given.
pub fn maybe_transformed<'a>(
    source: &'a dyn LogitSource,
    transform: Option<&'a dyn LogitTransform>,
) -> Box<dyn LogitSource + 'a> {
    match transform {
        Some(t) => Box::new(Transformed::new(source, t)),
        None => Box::new(source),
    }
}

/// Sum of natural-log probabilities of `seq[from..]`, each conditioned on
/// everything before it.
pub fn sequence_log_likelihood(
    model: &dyn LogitSource,
    seq: &[TokenId],
    from: usize,
) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut n = 0;
    for i in from..seq.len() {
        let lp = model.next_logits(&seq[..i])?.log_softmax();
        let id = seq[i] as usize;
        let p = *lp.get(id).ok_or(Error::TokenOutOfRange {
            id: seq[i],
            size: lp.len(),
        })?;
        total += p;
        n += 1;
    }
    Ok((total, n))
}

/// `exp` of the mean negative log-likelihood of every token given its
/// prefix. A leading `<s>` is context only and is not scored. With a
/// transform, each scored position uses the transformed logits.
pub fn perplexity(
    model: &dyn LogitSource,
    seq: &[TokenId],
    transform: Option<&dyn LogitTransform>,
) -> Result<f64> {
    let (nll, n) = negative_log_likelihood(model, seq, transform)?;
    Ok((nll / n as f64).exp())
}

/// Total negative log-likelihood and number of scored tokens; the building
/// block for corpus-level perplexity.
pub fn negative_log_likelihood(
    model: &dyn LogitSource,
    seq: &[TokenId],
    transform: Option<&dyn LogitTransform>,
) -> Result<(f64, usize)> {
    let from = usize::from(seq.first() == Some(&BOS));
    if seq.len() <= from {
        return Err(Error::EmptySequence);
    }
    let scored = maybe_transformed(model, transform);
    let (ll, n) = sequence_log_likelihood(scored.as_ref(), seq, from)?;
    Ok((-ll, n))
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Entropy of the next-token distribution after `prefix`.
pub fn entropy_at(model: &dyn LogitSource, prefix: &[TokenId]) -> Result<f64> {
    let probs = model.next_logits(prefix)?.softmax();
    Ok(entropy(&probs).max(0.0))
}

/// A hand-specified source: one fixed logit vector per call, picked by a
/// function of the prefix. Handy for synthetic tasks and tests.
pub struct FnSource<F> {
    size: usize,
    f: F,
}

impl<F> FnSource<F>
where
    F: Fn(&[TokenId]) -> Vec<f64> + Send + Sync,
{
    pub fn new(size: usize, f: F) -> Self {
        Self { size, f }
    }
}

impl<F> LogitSource for FnSource<F>
where
    F: Fn(&[TokenId]) -> Vec<f64> + Send + Sync,
{
    fn vocab_size(&self) -> usize {
        self.size
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
        let v = (self.f)(prefix);
        if v.len() != self.size {
            return Err(Error::LengthMismatch {
                expected: self.size,
                actual: v.len(),
            });
        }
        Ok(LogitVector(v))
    }
}

/// Keeps the inner source's top-1 token and lifts it to sit exactly
/// `margin` above the runner-up at every step.
pub struct Sharpened<S> {
    pub inner: S,
    pub margin: f64,
}

impl<S: LogitSource> LogitSource for Sharpened<S> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
        let mut logits = self.inner.next_logits(prefix)?;
        let top = logits.argmax() as usize;
        let runner_up = logits
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != top)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        logits[top] = runner_up + self.margin;
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform6() -> FnSource<impl Fn(&[TokenId]) -> Vec<f64> + Send + Sync> {
        FnSource::new(6, |_| vec![0.0; 6])
    }

    #[test]
    fn uniform_perplexity_is_vocab_size() {
        let m = uniform6();
        let ppl = perplexity(&m, &[BOS, 3, 4, 5, 2], None).unwrap();
        assert!((ppl - 6.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_model_has_unit_perplexity() {
        // token 3 always has all the mass and is always realized
        let m = FnSource::new(4, |_| vec![-1e9, -1e9, -1e9, 0.0]);
        let ppl = perplexity(&m, &[BOS, 3, 3, 3], None).unwrap();
        assert!((ppl - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perplexity_needs_a_scored_token() {
        let m = uniform6();
        assert!(matches!(perplexity(&m, &[BOS], None), Err(Error::EmptySequence)));
        assert!(matches!(perplexity(&m, &[], None), Err(Error::EmptySequence)));
    }

    #[test]
    fn entropy_extremes() {
        let m = uniform6();
        assert!((entropy_at(&m, &[]).unwrap() - 6f64.ln()).abs() < 1e-12);
        let one_hot = FnSource::new(3, |_| vec![0.0, -1e6, -1e6]);
        assert!(entropy_at(&one_hot, &[]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn softmax_of_shifted_logits_is_unchanged() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[101.0, 102.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn sharpened_enforces_margin() {
        let m = Sharpened {
            inner: FnSource::new(3, |_| vec![0.5, 0.2, 0.1]),
            margin: 20.0,
        };
        let l = m.next_logits(&[]).unwrap();
        assert_eq!(l.argmax(), 0);
        assert!((l[0] - l[1] - 20.0).abs() < 1e-12);
    }
}
