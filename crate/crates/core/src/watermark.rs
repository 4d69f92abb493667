//! Green/red vocabulary partitions and the logit bias built on them.
//!
//! KGW and EWD share generation: the green list is a keyed function of the
//! previous token. The SIR surrogate derives its green list from a keyed
//! embedding of the trailing prefix window instead, so similar prefixes get
//! similar lists and roughly half the vocabulary is green.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenSequence, BOS, EOS};
use crate::error::{Error, Result};
use crate::hashing::{keyed_hash, CounterRng};
use crate::lm::{argmax, softmax, LogitSource, LogitTransform, LogitVector};

/// Embedding width of the SIR surrogate.
pub const EMBED_DIM: usize = 64;
/// Number of trailing prefix tokens the SIR surrogate embeds.
pub const EMBED_WINDOW: usize = 16;

const EMBED_SALT: u64 = 0x5349_525F_454D_4244; // "SIR_EMBD"
const PROJECTION_SALT: u64 = 0x5349_525F_5052_4F4A; // "SIR_PROJ"

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scheme {
    Kgw,
    Ewd,
    Sir,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Kgw, Scheme::Ewd, Scheme::Sir];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Kgw => "KGW",
            Scheme::Ewd => "EWD",
            Scheme::Sir => "SIR",
        }
    }

    /// Whether the green list comes from the previous token alone.
    pub fn is_lexical(self) -> bool {
        matches!(self, Scheme::Kgw | Scheme::Ewd)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "KGW" => Ok(Scheme::Kgw),
            "EWD" => Ok(Scheme::Ewd),
            "SIR" => Ok(Scheme::Sir),
            _ => Err(Error::InvalidParameter(format!("unknown scheme {s:?}"))),
        }
    }
}

/// Full watermark configuration.
///
/// For SIR the green fraction is not a free parameter; `gamma` holds the
/// nominal 0.5 and detection substitutes the measured fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WatermarkSpec {
    pub scheme: Scheme,
    pub gamma: f64,
    pub delta: f64,
    pub key: u64,
}

impl WatermarkSpec {
    pub fn new(scheme: Scheme, gamma: f64, delta: f64, key: u64) -> Result<Self> {
        let spec = Self {
            scheme,
            gamma: if scheme == Scheme::Sir { 0.5 } else { gamma },
            delta,
            key,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn kgw(gamma: f64, delta: f64, key: u64) -> Result<Self> {
        Self::new(Scheme::Kgw, gamma, delta, key)
    }

    pub fn ewd(gamma: f64, delta: f64, key: u64) -> Result<Self> {
        Self::new(Scheme::Ewd, gamma, delta, key)
    }

    pub fn sir(delta: f64, key: u64) -> Result<Self> {
        Self::new(Scheme::Sir, 0.5, delta, key)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "delta must be finite and non-negative, got {}",
                self.delta
            )));
        }
        if self.scheme == Scheme::Sir && self.gamma != 0.5 {
            return Err(Error::InvalidParameter(
                "SIR's green fraction is implicit and cannot be set".into(),
            ));
        }
        Ok(())
    }

    pub fn with_delta(self, delta: f64) -> Self {
        Self { delta, ..self }
    }

    pub fn with_key(self, key: u64) -> Self {
        Self { key, ..self }
    }

    pub fn with_gamma(self, gamma: f64) -> Self {
        Self { gamma, ..self }
    }
}

/// Green-list membership for one generation step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub green_mask: Vec<bool>,
    pub green_count: usize,
}

impl Partition {
    pub fn from_mask(green_mask: Vec<bool>) -> Self {
        let green_count = green_mask.iter().filter(|g| **g).count();
        Self {
            green_mask,
            green_count,
        }
    }

    pub fn len(&self) -> usize {
        self.green_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.green_mask.is_empty()
    }

    pub fn is_green(&self, id: TokenId) -> bool {
        self.green_mask.get(id as usize).copied().unwrap_or(false)
    }

    pub fn green_fraction(&self) -> f64 {
        self.green_count as f64 / self.green_mask.len() as f64
    }
}

/// Size of a KGW green list.
pub fn green_list_size(gamma: f64, vocab_size: usize) -> usize {
    (gamma * vocab_size as f64).floor() as usize
}

/// Keyed green list from the previous token: a forward Fisher-Yates pass
/// over `0..vocab_size` driven by [`CounterRng`] seeded with
/// `keyed_hash(key, last_token)`; the first `floor(gamma * |V|)` positions of
/// the shuffled order are green.
pub fn kgw_partition(spec: &WatermarkSpec, last_token: TokenId, vocab_size: usize) -> Result<Partition> {
    if !spec.scheme.is_lexical() {
        return Err(Error::SchemeMismatch {
            expected: "KGW or EWD",
            actual: spec.scheme.name(),
        });
    }
    if last_token as usize >= vocab_size {
        return Err(Error::TokenOutOfRange {
            id: last_token,
            size: vocab_size,
        });
    }
    Ok(lexical_partition(spec.key, spec.gamma, last_token, vocab_size))
}

fn lexical_partition(key: u64, gamma: f64, last_token: TokenId, vocab_size: usize) -> Partition {
    let green_count = green_list_size(gamma, vocab_size);
    let mut rng = CounterRng::new(keyed_hash(key, last_token as u64));
    let mut order: Vec<u32> = (0..vocab_size as u32).collect();
    let mut green_mask = vec![false; vocab_size];
    for i in 0..green_count {
        let j = i + rng.below((vocab_size - i) as u64) as usize;
        order.swap(i, j);
        green_mask[order[i] as usize] = true;
    }
    Partition {
        green_mask,
        green_count,
    }
}

/// Unit-norm prefix embedding used by the SIR surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixEmbedding(pub [f64; EMBED_DIM]);

impl PrefixEmbedding {
    /// Mean of keyed per-token vectors over the trailing window, normalized.
    /// An empty prefix embeds as `<s>`.
    pub fn of(key: u64, prefix: &[TokenId]) -> Self {
        let window: &[TokenId] = if prefix.is_empty() {
            &[BOS]
        } else {
            &prefix[prefix.len().saturating_sub(EMBED_WINDOW)..]
        };
        let mut acc = [0.0; EMBED_DIM];
        for &t in window {
            let mut rng = CounterRng::new(keyed_hash(key ^ EMBED_SALT, t as u64));
            for a in acc.iter_mut() {
                *a += rng.symmetric_unit();
            }
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for a in acc.iter_mut() {
                *a /= norm;
            }
        } else {
            acc[0] = 1.0;
        }
        Self(acc)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Precomputed partition machinery for one spec and vocabulary size.
///
/// Implements [`LogitTransform`]: KGW/EWD add `delta` to green logits, SIR
/// adds `+delta` to green and `-delta` to red logits.
#[derive(Debug, Clone)]
pub struct Watermarker {
    spec: WatermarkSpec,
    vocab_size: usize,
    /// Row-major `vocab_size x EMBED_DIM` keyed projection (SIR only).
    projection: Vec<f64>,
}

impl Watermarker {
    pub fn new(spec: WatermarkSpec, vocab_size: usize) -> Result<Self> {
        spec.validate()?;
        if vocab_size < 2 {
            return Err(Error::InvalidParameter(
                "vocabulary needs at least 2 tokens".into(),
            ));
        }
        let projection = if spec.scheme == Scheme::Sir {
            let mut rows = Vec::with_capacity(vocab_size * EMBED_DIM);
            for v in 0..vocab_size as u64 {
                let mut rng = CounterRng::new(keyed_hash(spec.key ^ PROJECTION_SALT, v));
                rows.extend((0..EMBED_DIM).map(|_| rng.symmetric_unit()));
            }
            rows
        } else {
            Vec::new()
        };
        Ok(Self {
            spec,
            vocab_size,
            projection,
        })
    }

    pub fn spec(&self) -> &WatermarkSpec {
        &self.spec
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Green list in force for the token following `prefix`.
    pub fn partition(&self, prefix: &[TokenId]) -> Result<Partition> {
        match self.spec.scheme {
            Scheme::Kgw | Scheme::Ewd => {
                let last = prefix.last().copied().unwrap_or(BOS);
                kgw_partition(&self.spec, last, self.vocab_size)
            }
            Scheme::Sir => Ok(self.sir_mask(&PrefixEmbedding::of(self.spec.key, prefix))),
        }
    }

    fn sir_mask(&self, e: &PrefixEmbedding) -> Partition {
        let mask = self
            .projection
            .chunks_exact(EMBED_DIM)
            .map(|row| row.iter().zip(&e.0).map(|(r, x)| r * x).sum::<f64>() > 0.0)
            .collect();
        Partition::from_mask(mask)
    }

    /// Biased copy of `logits` under `partition`.
    pub fn bias(&self, logits: &LogitVector, partition: &Partition) -> Result<LogitVector> {
        match self.spec.scheme {
            Scheme::Sir => apply_signed_bias(logits, partition, self.spec.delta),
            _ => apply_bias(logits, partition, self.spec.delta),
        }
    }
}

impl LogitTransform for Watermarker {
    fn transform(&self, prefix: &[TokenId], logits: &mut LogitVector) -> Result<()> {
        let partition = self.partition(prefix)?;
        *logits = self.bias(logits, &partition)?;
        Ok(())
    }
}

/// SIR-surrogate green list for the token following `prefix`.
pub fn sir_partition(spec: &WatermarkSpec, prefix: &[TokenId], vocab_size: usize) -> Result<Partition> {
    if spec.scheme != Scheme::Sir {
        return Err(Error::SchemeMismatch {
            expected: "SIR",
            actual: spec.scheme.name(),
        });
    }
    Watermarker::new(*spec, vocab_size)?.partition(prefix)
}

/// `l_i + delta` for green `i`, `l_i` otherwise.
pub fn apply_bias(logits: &[f64], partition: &Partition, delta: f64) -> Result<LogitVector> {
    check_len(logits, partition)?;
    Ok(LogitVector(
        logits
            .iter()
            .zip(&partition.green_mask)
            .map(|(&l, &g)| if g { l + delta } else { l })
            .collect(),
    ))
}

/// `l_i + delta` for green `i`, `l_i - delta` for red `i`.
pub fn apply_signed_bias(logits: &[f64], partition: &Partition, delta: f64) -> Result<LogitVector> {
    check_len(logits, partition)?;
    Ok(LogitVector(
        logits
            .iter()
            .zip(&partition.green_mask)
            .map(|(&l, &g)| if g { l + delta } else { l - delta })
            .collect(),
    ))
}

fn check_len(logits: &[f64], partition: &Partition) -> Result<()> {
    if logits.len() != partition.len() {
        return Err(Error::LengthMismatch {
            expected: partition.len(),
            actual: logits.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Decode {
    /// Highest logit, lowest id on ties.
    Greedy,
    Multinomial {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub max_tokens: usize,
    /// `</s>` is suppressed until this many tokens have been emitted.
    pub min_tokens: usize,
    pub decode: Decode,
    /// Tokens that end generation like `</s>` but are not emitted.
    pub stop_tokens: Vec<TokenId>,
}

impl GenerateOptions {
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            max_tokens,
            min_tokens: 0,
            decode: Decode::Greedy,
            stop_tokens: Vec::new(),
        }
    }

    pub fn sampled(max_tokens: usize, seed: u64) -> Self {
        Self {
            decode: Decode::Multinomial { seed },
            ..Self::greedy(max_tokens)
        }
    }

    /// Forces exactly `max_tokens` tokens by suppressing `</s>`.
    pub fn fixed_length(mut self) -> Self {
        self.min_tokens = self.max_tokens;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    StopToken,
    MaxTokens,
}

/// A prompt plus the tokens decoded after it.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Prompt followed by the output (`</s>` included when emitted).
    pub tokens: TokenSequence,
    pub prompt_len: usize,
    /// Green membership of each output token under the partition in force
    /// when it was decoded; empty without a watermark.
    pub green: Vec<bool>,
    pub stop: StopReason,
}

impl Generation {
    pub fn output(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    pub fn green_count(&self) -> usize {
        self.green.iter().filter(|g| **g).count()
    }
}

const SUPPRESSED: f64 = -1e30;

/// Autoregressive decoding with an optional watermark.
pub fn watermarked_generate(
    model: &dyn LogitSource,
    watermark: Option<&Watermarker>,
    prompt: &[TokenId],
    options: &GenerateOptions,
) -> Result<Generation> {
    if options.max_tokens == 0 {
        return Err(Error::InvalidParameter("max_tokens must be at least 1".into()));
    }
    let mut rng = match options.decode {
        Decode::Multinomial { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Decode::Greedy => None,
    };
    let mut tokens = prompt.to_vec();
    let mut green = Vec::new();
    let mut stop = StopReason::MaxTokens;
    for step in 0..options.max_tokens {
        let raw = model.next_logits(&tokens)?;
        let (mut logits, partition) = match watermark {
            Some(w) => {
                let p = w.partition(&tokens)?;
                (w.bias(&raw, &p)?, Some(p))
            }
            None => (raw, None),
        };
        if step < options.min_tokens {
            if let Some(l) = logits.get_mut(EOS as usize) {
                *l = SUPPRESSED;
            }
        }
        let next = match rng.as_mut() {
            None => argmax(&logits) as TokenId,
            Some(rng) => sample(&softmax(&logits), rng.gen::<f64>()),
        };
        if options.stop_tokens.contains(&next) {
            stop = StopReason::StopToken;
            break;
        }
        if let Some(p) = &partition {
            green.push(p.is_green(next));
        }
        tokens.push(next);
        if next == EOS {
            stop = StopReason::Eos;
            break;
        }
    }
    Ok(Generation {
        tokens: tokens.into(),
        prompt_len: prompt.len(),
        green,
        stop,
    })
}

/// Inverse-CDF draw; `u` in `[0, 1)`.
fn sample(probs: &[f64], u: f64) -> TokenId {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    last_positive as TokenId
}

/// One generation record as written to transcript JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub prompt_ids: Vec<TokenId>,
    pub output_ids: Vec<TokenId>,
    pub spec: Option<WatermarkSpec>,
    pub seed: Option<u64>,
}

impl Transcript {
    pub fn full_sequence(&self) -> Vec<TokenId> {
        let mut s = self.prompt_ids.clone();
        s.extend(&self.output_ids);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::FnSource;

    #[test]
    fn frozen_partition_vector() {
        // same vector as docs/partition.md
        assert_eq!(keyed_hash(42, 7), 0xD56F_D449_1D82_A4DD);
        let p = kgw_partition(&WatermarkSpec::kgw(0.25, 1.0, 42).unwrap(), 7, 20).unwrap();
        let green: Vec<TokenId> = (0..20).filter(|&i| p.is_green(i)).collect();
        assert_eq!(green, [8, 10, 12, 13, 17]);
    }

    #[test]
    fn green_count_is_floor() {
        let spec = WatermarkSpec::kgw(0.25, 2.0, 1).unwrap();
        assert_eq!(kgw_partition(&spec, 3, 8).unwrap().green_count, 2);
        let spec = WatermarkSpec::kgw(0.3, 2.0, 1).unwrap();
        let p = kgw_partition(&spec, 0, 10).unwrap();
        assert_eq!(p.green_count, 3);
        assert_eq!(p.green_mask.iter().filter(|g| **g).count(), 3);
    }

    #[test]
    fn kgw_is_deterministic_and_key_sensitive() {
        let spec = WatermarkSpec::kgw(0.5, 2.0, 77).unwrap();
        let a = kgw_partition(&spec, 5, 100).unwrap();
        assert_eq!(a, kgw_partition(&spec, 5, 100).unwrap());
        assert_ne!(a, kgw_partition(&spec.with_key(78), 5, 100).unwrap());
        assert_ne!(a, kgw_partition(&spec, 6, 100).unwrap());
    }

    #[test]
    fn scheme_mismatch_errors() {
        let sir = WatermarkSpec::sir(1.0, 3).unwrap();
        assert!(matches!(
            kgw_partition(&sir, 0, 10),
            Err(Error::SchemeMismatch { .. })
        ));
        let kgw = WatermarkSpec::kgw(0.5, 1.0, 3).unwrap();
        assert!(matches!(
            sir_partition(&kgw, &[1, 2], 10),
            Err(Error::SchemeMismatch { .. })
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(WatermarkSpec::kgw(0.0, 1.0, 0).is_err());
        assert!(WatermarkSpec::kgw(1.0, 1.0, 0).is_err());
        assert!(WatermarkSpec::kgw(0.5, -1.0, 0).is_err());
        assert_eq!(WatermarkSpec::new(Scheme::Sir, 0.1, 1.0, 0).unwrap().gamma, 0.5);
    }

    #[test]
    fn spec_json_shape() {
        let spec = WatermarkSpec::ewd(0.25, 1.5, 9).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"scheme":"EWD","gamma":0.25,"delta":1.5,"key":9}"#);
    }

    #[test]
    fn bias_examples() {
        let p = Partition::from_mask(vec![true, false]);
        let l = [0.0, 0.0];
        assert_eq!(apply_bias(&l, &p, 0.0).unwrap().0, l);
        let probs = apply_bias(&l, &p, 3f64.ln()).unwrap().softmax();
        assert!((probs[0] - 0.75).abs() < 1e-12);
        assert!((probs[1] - 0.25).abs() < 1e-12);
        let all = Partition::from_mask(vec![true; 3]);
        let before = softmax(&[1.0, 2.0, 0.5]);
        let after = apply_bias(&[1.0, 2.0, 0.5], &all, 2.0).unwrap().softmax();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            apply_bias(&[0.0; 3], &p, 1.0),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn embedding_is_unit_norm() {
        for prefix in [vec![], vec![5], (0..40).collect::<Vec<_>>()] {
            assert!((PrefixEmbedding::of(3, &prefix).norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sir_is_deterministic() {
        let spec = WatermarkSpec::sir(1.0, 11).unwrap();
        let a = sir_partition(&spec, &[1, 5, 9], 300).unwrap();
        assert_eq!(a, sir_partition(&spec, &[1, 5, 9], 300).unwrap());
    }

    #[test]
    fn zero_delta_generation_matches_plain() {
        let m = FnSource::new(8, |p: &[TokenId]| {
            (0..8).map(|i| ((i * 7 + p.len() * 3) % 5) as f64 * 0.3).collect()
        });
        let spec = WatermarkSpec::kgw(0.25, 0.0, 4).unwrap();
        let w = Watermarker::new(spec, 8).unwrap();
        for opts in [GenerateOptions::greedy(20), GenerateOptions::sampled(20, 5)] {
            let a = watermarked_generate(&m, Some(&w), &[BOS], &opts).unwrap();
            let b = watermarked_generate(&m, None, &[BOS], &opts).unwrap();
            assert_eq!(a.tokens, b.tokens);
        }
    }

    #[test]
    fn stop_tokens_and_eos() {
        // token 3 always wins, then EOS always wins
        let m = FnSource::new(5, |p: &[TokenId]| {
            let mut v = vec![0.0; 5];
            v[if p.len() < 3 { 3 } else { EOS as usize }] = 5.0;
            v
        });
        let g = watermarked_generate(&m, None, &[BOS], &GenerateOptions::greedy(10)).unwrap();
        assert_eq!(g.output(), [3, 3, EOS]);
        assert_eq!(g.stop, StopReason::Eos);
        let mut opts = GenerateOptions::greedy(10);
        opts.stop_tokens = vec![3];
        let g = watermarked_generate(&m, None, &[BOS], &opts).unwrap();
        assert!(g.output().is_empty());
        assert_eq!(g.stop, StopReason::StopToken);
        let g = watermarked_generate(&m, None, &[BOS], &GenerateOptions::greedy(6).fixed_length()).unwrap();
        assert_eq!(g.output().len(), 6);
        assert!(!g.output().contains(&EOS));
    }

    #[test]
    fn sampling_inverse_cdf() {
        assert_eq!(sample(&[0.25, 0.5, 0.25], 0.1), 0);
        assert_eq!(sample(&[0.25, 0.5, 0.25], 0.5), 1);
        assert_eq!(sample(&[0.25, 0.5, 0.25], 0.99), 2);
        assert_eq!(sample(&[0.5, 0.5, 0.0], 0.999_999_999_999_999_9), 1);
    }
}
