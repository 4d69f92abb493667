//! How a watermark interacts with label choice and option ranking.
//!
//! For CLS tasks the green/red membership of the handful of label tokens is
//! all that matters, so every one of the `2^|L|` assignments can be
//! evaluated directly from cached unwatermarked label logits. Memberships
//! are treated as independent Bernoulli(gamma) draws; the exact
//! hypergeometric correction from the fixed green-list size is negligible
//! when `|L|` is tiny compared to `|V|`.
//!
//! For MCQ tasks we measure how often the watermark leaves the model's
//! top-k preference over the options untouched, overall and by option
//! length.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::lm::{argmax, LogitSource};
use crate::taskeval::{mcq_scores, normalized_score, random_baseline, Category, Task};
use crate::watermark::{kgw_partition, WatermarkSpec, Watermarker};

/// Accuracy within this distance of the random baseline counts as a
/// collapse to random guessing.
pub const COLLAPSE_TOLERANCE: f64 = 0.02;

/// Largest label set enumerated exhaustively.
pub const MAX_LABELS: usize = 20;

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "gamma must be in (0, 1), got {gamma}"
        )));
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Binomial mass of the class of assignments with `n_green` of `n_total`
/// labels green.
pub fn partition_probability(n_total: usize, n_green: usize, gamma: f64) -> Result<f64> {
    let p = assignment_probability(n_total, n_green, gamma)?;
    Ok(binomial(n_total, n_green) * p)
}

/// Probability of one specific assignment with `n_green` green labels.
pub fn assignment_probability(n_total: usize, n_green: usize, gamma: f64) -> Result<f64> {
    if n_green > n_total {
        return Err(Error::InvalidCount(format!(
            "{n_green} green labels out of {n_total}"
        )));
    }
    check_gamma(gamma)?;
    Ok(gamma.powi(n_green as i32) * (1.0 - gamma).powi((n_total - n_green) as i32))
}

/// Unwatermarked logits of each label token at the label position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelLogits {
    pub label_ids: Vec<TokenId>,
    /// Per example: the prompt's last token, label logits, gold label.
    pub rows: Vec<LabelRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub last_token: TokenId,
    pub logits: Vec<f64>,
    pub gold: usize,
}

impl LabelLogits {
    pub fn num_labels(&self) -> usize {
        self.label_ids.len()
    }

    /// Accuracy when label `i` gets `boost[i]` added to its logit.
    pub fn accuracy_with(&self, boost: &[f64]) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let correct = self
            .rows
            .iter()
            .filter(|r| {
                let biased: Vec<f64> = r.logits.iter().zip(boost).map(|(l, b)| l + b).collect();
                argmax(&biased) == r.gold
            })
            .count();
        correct as f64 / self.rows.len() as f64
    }

    pub fn unwatermarked_accuracy(&self) -> f64 {
        self.accuracy_with(&vec![0.0; self.num_labels()])
    }
}

/// Caches the unwatermarked label-position logits of a CLS task.
pub fn label_position_logits(
    model: &dyn LogitSource,
    vocab: &Vocabulary,
    task: &Task,
) -> Result<LabelLogits> {
    if task.category()? != Category::Cls {
        return Err(Error::NotCls);
    }
    let labels = &task.examples[0].labels;
    if labels.len() > MAX_LABELS {
        return Err(Error::TooManyLabels(labels.len()));
    }
    let label_ids = labels
        .iter()
        .map(|l| match vocab.tokenize(l).ids() {
            [id] => Ok(*id),
            _ => Err(Error::MultiTokenLabel(l.clone())),
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = task
        .examples
        .par_iter()
        .map(|e| {
            let gold = e.gold_index.filter(|&g| g < label_ids.len()).ok_or_else(|| {
                Error::InvalidParameter(format!("example {:?} has no valid gold label", e.prompt))
            })?;
            let prompt = vocab.encode_prompt(&e.prompt);
            let logits = model.next_logits(&prompt)?;
            Ok(LabelRow {
                last_token: *prompt.last().expect("prompt starts with <s>"),
                logits: label_ids.iter().map(|&id| logits[id as usize]).collect(),
                gold,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelLogits { label_ids, rows })
}

/// One green/red assignment of the label tokens and its effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPartitionOutcome {
    /// `true` = green, indexed like the task's label list.
    pub assignment: Vec<bool>,
    pub probability: f64,
    pub accuracy: f64,
    /// `None` when the unwatermarked accuracy equals the baseline.
    pub normalized: Option<f64>,
}

impl LabelPartitionOutcome {
    pub fn bitstring(&self) -> String {
        self.assignment
            .iter()
            .map(|&g| if g { '1' } else { '0' })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionEnumeration {
    pub delta: f64,
    pub gamma: f64,
    pub unwatermarked_accuracy: f64,
    pub random_baseline: f64,
    pub expected_accuracy: f64,
    pub worst_accuracy: f64,
    pub best_accuracy: f64,
    pub outcomes: Vec<LabelPartitionOutcome>,
}

/// Scores every label assignment from cached logits.
pub fn enumerate_from_logits(
    table: &LabelLogits,
    baseline: f64,
    delta: f64,
    gamma: f64,
) -> Result<PartitionEnumeration> {
    check_gamma(gamma)?;
    let n = table.num_labels();
    if n > MAX_LABELS {
        return Err(Error::TooManyLabels(n));
    }
    let unwm = table.unwatermarked_accuracy();
    let outcomes: Vec<LabelPartitionOutcome> = (0..1u32 << n)
        .into_par_iter()
        .map(|bits| {
            let assignment: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
            let boost: Vec<f64> = assignment.iter().map(|&g| if g { delta } else { 0.0 }).collect();
            let n_green = bits.count_ones() as usize;
            let accuracy = table.accuracy_with(&boost);
            LabelPartitionOutcome {
                probability: assignment_probability(n, n_green, gamma).expect("validated"),
                accuracy,
                normalized: normalized_score(accuracy, unwm, baseline).ok(),
                assignment,
            }
        })
        .collect();
    let expected = outcomes.iter().map(|o| o.probability * o.accuracy).sum();
    let worst = outcomes.iter().map(|o| o.accuracy).fold(f64::INFINITY, f64::min);
    let best = outcomes
        .iter()
        .map(|o| o.accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(PartitionEnumeration {
        delta,
        gamma,
        unwatermarked_accuracy: unwm,
        random_baseline: baseline,
        expected_accuracy: expected,
        worst_accuracy: worst,
        best_accuracy: best,
        outcomes,
    })
}

/// Evaluates a CLS task under each of the `2^|L|` label assignments,
/// boosting green labels by `delta` at the label position only.
pub fn enumerate_partitions(
    model: &dyn LogitSource,
    vocab: &Vocabulary,
    task: &Task,
    delta: f64,
    gamma: f64,
) -> Result<PartitionEnumeration> {
    let table = label_position_logits(model, vocab, task)?;
    enumerate_from_logits(&table, random_baseline(&task.examples)?, delta, gamma)
}

fn check_complete(outcomes: &[LabelPartitionOutcome]) -> Result<()> {
    let n = outcomes.first().map_or(0, |o| o.assignment.len());
    let expected = 1usize << n;
    let mut seen = vec![false; expected];
    for o in outcomes {
        let bits = o
            .assignment
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &g)| acc | (g as usize) << i);
        if o.assignment.len() == n {
            seen[bits] = true;
        }
    }
    let got = seen.iter().filter(|&&s| s).count();
    if outcomes.is_empty() || got != expected {
        return Err(Error::IncompleteEnumeration { got, expected });
    }
    Ok(())
}

/// Normalized score of the probability-weighted expected accuracy.
pub fn expected_normalized_score(
    outcomes: &[LabelPartitionOutcome],
    unwatermarked_raw: f64,
    baseline: f64,
) -> Result<f64> {
    check_complete(outcomes)?;
    let expected = outcomes.iter().map(|o| o.probability * o.accuracy).sum();
    normalized_score(expected, unwatermarked_raw, baseline)
}

/// Total probability of assignments whose accuracy is within `tolerance`
/// of the baseline or below it.
pub fn probability_of_random_collapse(
    outcomes: &[LabelPartitionOutcome],
    baseline: f64,
    tolerance: f64,
) -> Result<f64> {
    check_complete(outcomes)?;
    Ok(outcomes
        .iter()
        .filter(|o| o.accuracy <= baseline + tolerance)
        .fold(0.0, |acc, o| acc + o.probability))
}

/// Expected accuracy over `n_keys` random keys, each driving the real
/// KGW partition after every example's own prompt.
pub fn sampled_expected_accuracy(
    table: &LabelLogits,
    vocab_size: usize,
    delta: f64,
    gamma: f64,
    n_keys: usize,
    seed: u64,
) -> Result<f64> {
    if n_keys == 0 {
        return Err(Error::InvalidCount("need at least one key".into()));
    }
    if table.rows.is_empty() {
        return Err(Error::EmptySample("label rows"));
    }
    let accs = (0..n_keys as u64)
        .into_par_iter()
        .map(|i| {
            let spec = WatermarkSpec::kgw(gamma, delta, crate::hashing::keyed_hash(seed, i))?;
            let mut correct = 0usize;
            let mut cached: Option<(TokenId, Vec<f64>)> = None;
            for r in &table.rows {
                let boost = match &cached {
                    Some((t, b)) if *t == r.last_token => b.clone(),
                    _ => {
                        let p = kgw_partition(&spec, r.last_token, vocab_size)?;
                        let b: Vec<f64> = table
                            .label_ids
                            .iter()
                            .map(|&id| if p.is_green(id) { delta } else { 0.0 })
                            .collect();
                        cached = Some((r.last_token, b.clone()));
                        b
                    }
                };
                let biased: Vec<f64> = r.logits.iter().zip(&boost).map(|(l, b)| l + b).collect();
                correct += (argmax(&biased) == r.gold) as usize;
            }
            Ok(correct as f64 / table.rows.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(accs.iter().sum::<f64>() / n_keys as f64)
}

/// Whether top-k agreement requires the same order or only the same set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopKMatch {
    Order,
    Set,
}

impl TopKMatch {
    pub fn name(self) -> &'static str {
        match self {
            TopKMatch::Order => "order",
            TopKMatch::Set => "set",
        }
    }

    /// Chance that a uniformly random ranking of `n` options matches.
    pub fn random_baseline(self, n: usize, k: usize) -> f64 {
        let sets = binomial(n, k);
        match self {
            TopKMatch::Order => 1.0 / (sets * (1..=k).map(|i| i as f64).product::<f64>()),
            TopKMatch::Set => 1.0 / sets,
        }
    }

    fn matches(self, a: &[usize], b: &[usize], k: usize) -> bool {
        match self {
            TopKMatch::Order => a[..k] == b[..k],
            TopKMatch::Set => {
                let mut x = a[..k].to_vec();
                let mut y = b[..k].to_vec();
                x.sort_unstable();
                y.sort_unstable();
                x == y
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankStabilityRow {
    pub k: usize,
    #[serde(rename = "match")]
    pub matching: TopKMatch,
    pub proportion_unchanged: f64,
    pub random_permutation_baseline: f64,
}

/// Option rankings of every MCQ example with and without the watermark.
#[derive(Debug, Clone, PartialEq)]
pub struct Rankings {
    pub unwatermarked: Vec<Vec<usize>>,
    pub watermarked: Vec<Vec<usize>>,
    pub mean_choice_words: Vec<f64>,
}

fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn mcq_rankings(
    model: &dyn LogitSource,
    vocab: &Vocabulary,
    spec: &WatermarkSpec,
    task: &Task,
) -> Result<Rankings> {
    let category = task.category()?;
    if category != Category::Mcq {
        return Err(Error::CategoryMismatch {
            expected: "MCQ",
            actual: category.name(),
        });
    }
    let wm = Watermarker::new(*spec, model.vocab_size())?;
    let pairs = task
        .examples
        .par_iter()
        .map(|e| {
            let u = ranking(&mcq_scores(model, None, vocab, e)?);
            let w = ranking(&mcq_scores(model, Some(&wm), vocab, e)?);
            Ok((u, w))
        })
        .collect::<Result<Vec<_>>>()?;
    let (unwatermarked, watermarked) = pairs.into_iter().unzip();
    Ok(Rankings {
        unwatermarked,
        watermarked,
        mean_choice_words: task.examples.iter().map(|e| e.mean_choice_words()).collect(),
    })
}

impl Rankings {
    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::InvalidCount("k must be at least 1".into()));
        }
        if let Some((example, r)) = self.unwatermarked.iter().enumerate().find(|(_, r)| r.len() < k) {
            return Err(Error::KTooLarge {
                k,
                choices: r.len(),
                example,
            });
        }
        Ok(())
    }

    fn proportion(&self, indices: &[usize], k: usize, matching: TopKMatch) -> f64 {
        let same = indices
            .iter()
            .filter(|&&i| matching.matches(&self.unwatermarked[i], &self.watermarked[i], k))
            .count();
        same as f64 / indices.len() as f64
    }

    pub fn stability(&self, k_values: &[usize]) -> Result<Vec<RankStabilityRow>> {
        if self.unwatermarked.is_empty() {
            return Err(Error::EmptySample("MCQ examples"));
        }
        let all: Vec<usize> = (0..self.unwatermarked.len()).collect();
        let mut rows = Vec::new();
        for matching in [TopKMatch::Order, TopKMatch::Set] {
            for &k in k_values {
                self.check_k(k)?;
                let baseline = self
                    .unwatermarked
                    .iter()
                    .map(|r| matching.random_baseline(r.len(), k))
                    .sum::<f64>()
                    / all.len() as f64;
                rows.push(RankStabilityRow {
                    k,
                    matching,
                    proportion_unchanged: self.proportion(&all, k, matching),
                    random_permutation_baseline: baseline,
                });
            }
        }
        Ok(rows)
    }

    pub fn stability_by_length(
        &self,
        buckets: &[LengthBucket],
        k: usize,
        matching: TopKMatch,
    ) -> Result<Vec<LengthBucketRow>> {
        self.check_k(k)?;
        Ok(buckets
            .iter()
            .filter_map(|b| {
                let members: Vec<usize> = (0..self.mean_choice_words.len())
                    .filter(|&i| b.contains(self.mean_choice_words[i]))
                    .collect();
                (!members.is_empty()).then(|| LengthBucketRow {
                    min_words: b.min_words,
                    max_words: b.max_words,
                    examples: members.len(),
                    k,
                    matching,
                    proportion_unchanged: self.proportion(&members, k, matching),
                })
            })
            .collect())
    }
}

/// Per-k share of examples whose top-k options are unchanged by the
/// watermark, in both order and set variants.
pub fn rank_stability(
    model: &dyn LogitSource,
    vocab: &Vocabulary,
    spec: &WatermarkSpec,
    task: &Task,
    k_values: &[usize],
) -> Result<Vec<RankStabilityRow>> {
    mcq_rankings(model, vocab, spec, task)?.stability(k_values)
}

/// Half-open range `[min_words, max_words)` of mean option length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub min_words: f64,
    pub max_words: f64,
}

impl LengthBucket {
    pub fn new(min_words: f64, max_words: f64) -> Self {
        Self { min_words, max_words }
    }

    pub fn contains(&self, words: f64) -> bool {
        words >= self.min_words && words < self.max_words
    }

    /// Buckets split at the given edges, the last one open-ended.
    pub fn from_edges(edges: &[f64]) -> Vec<Self> {
        let mut out: Vec<Self> = edges.windows(2).map(|w| Self::new(w[0], w[1])).collect();
        if let Some(&last) = edges.last() {
            out.push(Self::new(last, f64::INFINITY));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucketRow {
    pub min_words: f64,
    pub max_words: f64,
    pub examples: usize,
    pub k: usize,
    #[serde(rename = "match")]
    pub matching: TopKMatch,
    pub proportion_unchanged: f64,
}

/// Top-k stability per option-length bucket; empty buckets are omitted.
pub fn stability_by_length(
    model: &dyn LogitSource,
    vocab: &Vocabulary,
    spec: &WatermarkSpec,
    task: &Task,
    buckets: &[LengthBucket],
    k: usize,
    matching: TopKMatch,
) -> Result<Vec<LengthBucketRow>> {
    mcq_rankings(model, vocab, spec, task)?.stability_by_length(buckets, k, matching)
}

/// Chance that two independently placed tokens fall on opposite sides of
/// the partition.
pub fn disagreement_probability(gamma: f64) -> f64 {
    1.0 - gamma * gamma - (1.0 - gamma) * (1.0 - gamma)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_partitions_csv<W: Write>(outcomes: &[LabelPartitionOutcome], mut out: W) -> std::io::Result<()> {
    writeln!(out, "assignment,probability,accuracy,normalized")?;
    for o in outcomes {
        writeln!(
            out,
            "{},{},{},{}",
            o.bitstring(),
            o.probability,
            o.accuracy,
            fmt_opt(o.normalized)
        )?;
    }
    Ok(())
}

pub fn write_stability_csv<W: Write>(rows: &[RankStabilityRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "k,match,proportion,baseline")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.k,
            r.matching.name(),
            r.proportion_unchanged,
            r.random_permutation_baseline
        )?;
    }
    Ok(())
}

pub fn write_length_csv<W: Write>(rows: &[LengthBucketRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "min_words,max_words,examples,k,match,proportion")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.min_words,
            r.max_words,
            r.examples,
            r.k,
            r.matching.name(),
            r.proportion_unchanged
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&[f64], usize)]) -> LabelLogits {
        LabelLogits {
            label_ids: (3..3 + rows[0].0.len() as u32).collect(),
            rows: rows
                .iter()
                .map(|(l, g)| LabelRow {
                    last_token: 1,
                    logits: l.to_vec(),
                    gold: *g,
                })
                .collect(),
        }
    }

    #[test]
    fn binomial_examples() {
        assert!((assignment_probability(2, 1, 0.25).unwrap() - 0.1875).abs() < 1e-15);
        assert_eq!(partition_probability(2, 1, 0.25).unwrap(), 0.375);
        let total: f64 = (0..=3).map(|g| partition_probability(3, g, 0.1).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(matches!(
            partition_probability(2, 3, 0.5),
            Err(Error::InvalidCount(_))
        ));
        assert!(partition_probability(2, 1, 1.0).is_err());
    }

    #[test]
    fn zero_delta_is_unwatermarked_everywhere() {
        let t = table(&[(&[2.0, 1.0], 0), (&[0.0, 1.0], 0)]);
        let e = enumerate_from_logits(&t, 0.5, 0.0, 0.25).unwrap();
        assert!(e.outcomes.iter().all(|o| o.accuracy == 0.5));
        assert_eq!(e.expected_accuracy, 0.5);
        assert_eq!(e.worst_accuracy, 0.5);
    }

    #[test]
    fn hand_enumerated_binary_example() {
        // logits (2.0, 1.0), gold 0, delta 1.5: only boosting label 1 alone flips it
        let t = table(&[(&[2.0, 1.0], 0)]);
        let e = enumerate_from_logits(&t, 0.5, 1.5, 0.25).unwrap();
        let acc: Vec<(String, f64, f64)> = e
            .outcomes
            .iter()
            .map(|o| (o.bitstring(), o.probability, o.accuracy))
            .collect();
        assert_eq!(acc[0], ("00".into(), 0.5625, 1.0));
        assert_eq!(acc[1], ("10".into(), 0.1875, 1.0));
        assert_eq!(acc[2], ("01".into(), 0.1875, 0.0));
        assert_eq!(acc[3], ("11".into(), 0.0625, 1.0));
        assert!((e.expected_accuracy - 0.8125).abs() < 1e-12);
        assert_eq!(e.worst_accuracy, 0.0);
        assert!(e.worst_accuracy <= e.expected_accuracy && e.expected_accuracy <= e.best_accuracy);
    }

    #[test]
    fn expected_normalized_hand_case() {
        let o = |bits: Vec<bool>, p, a| LabelPartitionOutcome {
            assignment: bits,
            probability: p,
            accuracy: a,
            normalized: None,
        };
        let outcomes = vec![o(vec![false], 0.25, 0.5), o(vec![true], 0.75, 0.9)];
        let s = expected_normalized_score(&outcomes, 0.9, 0.5).unwrap();
        assert!((s - 0.75).abs() < 1e-12);
        assert!(matches!(
            expected_normalized_score(&outcomes[..1], 0.9, 0.5),
            Err(Error::IncompleteEnumeration { got: 1, expected: 2 })
        ));
    }

    #[test]
    fn collapse_probability_of_single_green_assignments() {
        // both single-green assignments hand the win to the wrong label
        let t = table(&[(&[1.0, 0.5], 0), (&[0.5, 1.0], 1)]);
        let e = enumerate_from_logits(&t, 0.5, 3.0, 0.25).unwrap();
        let p = probability_of_random_collapse(&e.outcomes, 0.5, COLLAPSE_TOLERANCE).unwrap();
        assert!((p - 0.375).abs() < 1e-12);
        let calm = enumerate_from_logits(&t, 0.5, 0.0, 0.25).unwrap();
        assert_eq!(
            probability_of_random_collapse(&calm.outcomes, 0.5, 0.02).unwrap(),
            0.0
        );
    }

    #[test]
    fn probabilities_sum_to_one() {
        for n in 1..=10 {
            let logits = vec![0.0; n];
            let t = table(&[(&logits, 0)]);
            let e = enumerate_from_logits(&t, 1.0 / n as f64, 1.0, 0.3).unwrap();
            let s: f64 = e.outcomes.iter().map(|o| o.probability).sum();
            assert!((s - 1.0).abs() < 1e-9, "n={n}");
        }
    }

    #[test]
    fn disagreement_examples() {
        assert_eq!(disagreement_probability(0.5), 0.5);
        assert!((disagreement_probability(0.1) - 0.18).abs() < 1e-12);
        for g in [0.1, 0.25, 0.4] {
            assert!((disagreement_probability(g) - disagreement_probability(1.0 - g)).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_baselines() {
        assert_eq!(TopKMatch::Order.random_baseline(4, 1), 0.25);
        assert!((TopKMatch::Order.random_baseline(4, 2) - 1.0 / 12.0).abs() < 1e-12);
        assert!((TopKMatch::Set.random_baseline(4, 2) - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn ordered_stability_is_prefix_monotone() {
        let r = Rankings {
            unwatermarked: vec![vec![0, 1, 2], vec![0, 1, 2], vec![2, 1, 0]],
            watermarked: vec![vec![0, 2, 1], vec![1, 0, 2], vec![2, 1, 0]],
            mean_choice_words: vec![1.0, 5.0, 9.0],
        };
        let rows = r.stability(&[1, 2, 3]).unwrap();
        let order: Vec<f64> = rows
            .iter()
            .filter(|r| r.matching == TopKMatch::Order)
            .map(|r| r.proportion_unchanged)
            .collect();
        assert_eq!(order, vec![2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        let set: Vec<f64> = rows
            .iter()
            .filter(|r| r.matching == TopKMatch::Set)
            .map(|r| r.proportion_unchanged)
            .collect();
        assert_eq!(set, vec![2.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!(matches!(r.stability(&[4]), Err(Error::KTooLarge { k: 4, .. })));

        let buckets = LengthBucket::from_edges(&[0.0, 4.0, 8.0, 100.0]);
        let by_len = r.stability_by_length(&buckets, 1, TopKMatch::Order).unwrap();
        assert_eq!(by_len.len(), 3);
        assert_eq!(by_len[1].proportion_unchanged, 0.0);
        let whole = r
            .stability_by_length(&[LengthBucket::new(0.0, f64::INFINITY)], 1, TopKMatch::Order)
            .unwrap();
        assert_eq!(whole[0].proportion_unchanged, order[0]);
    }
}
