//! Downstream task evaluation for the four task categories.
//!
//! * CLS: pick the label with the highest (summed) log-probability after
//!   the prompt.
//! * MCQ: pick the choice with the highest average per-token
//!   log-likelihood.
//! * SGEN / LGEN: greedy decoding scored with token F1 / corpus BLEU.
//!
//! Every decoder takes an optional [`Watermarker`]; when present, every
//! scored or decoded position uses the watermarked logits.

mod metrics;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{bleu_stats, corpus_bleu, token_f1, BleuStats};

use crate::corpus::{TokenId, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::lm::{argmax, maybe_transformed, LogitSource, LogitTransform};
use crate::watermark::{watermarked_generate, GenerateOptions, Watermarker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Category {
    Cls,
    Mcq,
    Sgen,
    Lgen,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Cls => "CLS",
            Category::Mcq => "MCQ",
            Category::Sgen => "SGEN",
            Category::Lgen => "LGEN",
        }
    }

    pub fn metric(self) -> Metric {
        match self {
            Category::Cls | Category::Mcq => Metric::Accuracy,
            Category::Sgen => Metric::F1,
            Category::Lgen => Metric::Bleu,
        }
    }

    /// Default generation budget for the generative categories.
    pub fn max_tokens(self) -> usize {
        match self {
            Category::Lgen => 256,
            _ => 32,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    F1,
    Bleu,
}

/// One test item; the fields used depend on the category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub category: Category,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_index: Option<usize>,
}

impl TaskExample {
    fn expect(&self, category: Category) -> Result<()> {
        if self.category != category {
            return Err(Error::CategoryMismatch {
                expected: category.name(),
                actual: self.category.name(),
            });
        }
        Ok(())
    }

    /// Mean choice length in words.
    pub fn mean_choice_words(&self) -> f64 {
        if self.choices.is_empty() {
            return 0.0;
        }
        let words: usize = self.choices.iter().map(|c| c.split_whitespace().count()).sum();
        words as f64 / self.choices.len() as f64
    }
}

/// A named list of examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub name: String,
    pub examples: Vec<TaskExample>,
}

impl Task {
    pub fn new(name: impl Into<String>, examples: Vec<TaskExample>) -> Self {
        Self {
            name: name.into(),
            examples,
        }
    }

    /// The single category shared by every example.
    pub fn category(&self) -> Result<Category> {
        let first = self
            .examples
            .first()
            .ok_or(Error::EmptySample("task examples"))?
            .category;
        if let Some(other) = self.examples.iter().find(|e| e.category != first) {
            return Err(Error::MixedCategories(first.name(), other.category.name()));
        }
        if first == Category::Cls {
            let labels = &self.examples[0].labels;
            if self.examples.iter().any(|e| &e.labels != labels) {
                return Err(Error::InvalidParameter(
                    "CLS examples must share one label list".into(),
                ));
            }
        }
        Ok(first)
    }

    /// Reads JSONL, one [`TaskExample`] per line; the task is named after
    /// the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let examples = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
            .collect::<Result<Vec<TaskExample>>>()?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "task".into());
        Ok(Self::new(name, examples))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.examples {
            out.push_str(&serde_json::to_string(e).expect("example serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn as_transform(w: Option<&Watermarker>) -> Option<&dyn LogitTransform> {
    w.map(|w| w as &dyn LogitTransform)
}

/// Summed log-probability of `continuation` after `context`, plus its
/// token count.
fn continuation_log_likelihood(
    model: &dyn LogitSource,
    context: &[TokenId],
    continuation: &[TokenId],
) -> Result<f64> {
    let mut seq = context.to_vec();
    let mut total = 0.0;
    for &t in continuation {
        let lp = model.next_logits(&seq)?.log_softmax();
        total += lp[t as usize];
        seq.push(t);
    }
    Ok(total)
}

fn encode_options(vocab: &Vocabulary, options: &[String]) -> Result<Vec<TokenSequence>> {
    options
        .iter()
        .map(|o| {
            let ids = vocab.tokenize(o);
            if ids.is_empty() {
                Err(Error::InvalidParameter(format!("option {o:?} has no tokens")))
            } else {
                Ok(ids)
            }
        })
        .collect()
}

/// Per-label summed log-probabilities of a CLS example.
pub fn cls_scores(
    model: &dyn LogitSource,
    watermark: Option<&Watermarker>,
    vocab: &Vocabulary,
    example: &TaskExample,
) -> Result<Vec<f64>> {
    example.expect(Category::Cls)?;
    let scored = maybe_transformed(model, as_transform(watermark));
    let prompt = vocab.encode_prompt(&example.prompt);
    let labels = encode_options(vocab, &example.labels)?;
    let first = scored.next_logits(&prompt)?.log_softmax();
    labels
        .iter()
        .map(|l| {
            let mut ctx = prompt.to_vec();
            ctx.push(l[0]);
            Ok(first[l[0] as usize] + continuation_log_likelihood(scored.as_ref(), &ctx, &l[1..])?)
        })
        .collect()
}

/// Index of the most probable label, lowest index on ties.
pub fn cls_predict(
    model: &dyn LogitSource,
    watermark: Option<&Watermarker>,
    vocab: &Vocabulary,
    example: &TaskExample,
) -> Result<usize> {
    Ok(argmax(&cls_scores(model, watermark, vocab, example)?))
}

/// Per-choice average token log-likelihood of an MCQ example.
pub fn mcq_scores(
    model: &dyn LogitSource,
    watermark: Option<&Watermarker>,
    vocab: &Vocabulary,
    example: &TaskExample,
) -> Result<Vec<f64>> {
    example.expect(Category::Mcq)?;
    if example.choices.len() < 2 {
        return Err(Error::InvalidParameter("MCQ needs at least two choices".into()));
    }
    let scored = maybe_transformed(model, as_transform(watermark));
    let prompt = vocab.encode_prompt(&example.prompt);
    encode_options(vocab, &example.choices)?
        .iter()
        .map(|c| Ok(continuation_log_likelihood(scored.as_ref(), &prompt, c)? / c.len() as f64))
        .collect()
}

pub fn mcq_predict(
    model: &dyn LogitSource,
    watermark: Option<&Watermarker>,
    vocab: &Vocabulary,
    example: &TaskExample,
) -> Result<usize> {
    Ok(argmax(&mcq_scores(model, watermark, vocab, example)?))
}

/// Greedy answer for a generative example. SGEN stops at `</s>` or the
/// first `.`; LGEN only at `</s>`.
pub fn generate_answer(
    model: &dyn LogitSource,
    watermark: Option<&Watermarker>,
    vocab: &Vocabulary,
    example: &TaskExample,
    mode: Category,
    max_tokens: usize,
) -> Result<String> {
    if !matches!(mode, Category::Sgen | Category::Lgen) {
        return Err(Error::InvalidParameter(format!(
            "{mode} is not a generation mode"
        )));
    }
    example.expect(mode)?;
    let mut opts = GenerateOptions::greedy(max_tokens);
    if mode == Category::Sgen {
        opts.stop_tokens.extend(vocab.id("."));
    }
    let prompt = vocab.encode_prompt(&example.prompt);
    let g = watermarked_generate(model, watermark, &prompt, &opts)?;
    Ok(vocab.detokenize(g.output()))
}

/// Expected score of a uniformly random predictor.
pub fn random_baseline(examples: &[TaskExample]) -> Result<f64> {
    let category = Task::new("", examples.to_vec()).category()?;
    let per_example = |e: &TaskExample| match category {
        Category::Cls => 1.0 / e.labels.len().max(1) as f64,
        Category::Mcq => 1.0 / e.choices.len().max(1) as f64,
        Category::Sgen | Category::Lgen => 0.0,
    };
    Ok(examples.iter().map(per_example).sum::<f64>() / examples.len() as f64)
}

/// `(watermarked - baseline) / (unwatermarked - baseline)`.
pub fn normalized_score(raw_watermarked: f64, raw_unwatermarked: f64, baseline: f64) -> Result<f64> {
    let denom = raw_unwatermarked - baseline;
    if denom == 0.0 {
        return Err(Error::DegenerateBaseline(baseline));
    }
    Ok((raw_watermarked - baseline) / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub metric_name: Metric,
    pub raw: f64,
    pub random_baseline: f64,
    /// `None` when the unwatermarked score equals the baseline.
    pub normalized: Option<f64>,
}

impl ScoreReport {
    pub fn new(metric: Metric, raw: f64, raw_unwatermarked: f64, baseline: f64) -> Self {
        Self {
            metric_name: metric,
            raw,
            random_baseline: baseline,
            normalized: normalized_score(raw, raw_unwatermarked, baseline).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub score: f64,
}

/// Raw metric and per-example predictions for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRun {
    pub task: String,
    pub category: Category,
    pub metric_name: Metric,
    pub raw: f64,
    pub predictions: Vec<Prediction>,
}

/// Runs every example of `task` and aggregates its metric.
pub fn evaluate_task(
    model: &dyn LogitSource,
    watermark: Option<&Watermarker>,
    vocab: &Vocabulary,
    task: &Task,
) -> Result<TaskRun> {
    let category = task.category()?;
    let predictions: Vec<Prediction> = task
        .examples
        .par_iter()
        .map(|e| -> Result<Prediction> {
            match category {
                Category::Cls | Category::Mcq => {
                    let idx = if category == Category::Cls {
                        cls_predict(model, watermark, vocab, e)?
                    } else {
                        mcq_predict(model, watermark, vocab, e)?
                    };
                    let correct = e.gold_index == Some(idx);
                    Ok(Prediction {
                        index: Some(idx),
                        text: None,
                        score: if correct { 1.0 } else { 0.0 },
                    })
                }
                Category::Sgen | Category::Lgen => {
                    let text = generate_answer(model, watermark, vocab, e, category, category.max_tokens())?;
                    let score = if category == Category::Sgen {
                        token_f1(&text, &e.references)
                    } else {
                        0.0
                    };
                    Ok(Prediction {
                        index: None,
                        text: Some(text),
                        score,
                    })
                }
            }
        })
        .collect::<Result<_>>()?;
    let raw = match category {
        Category::Lgen => {
            let preds: Vec<String> = predictions
                .iter()
                .map(|p| p.text.clone().unwrap_or_default())
                .collect();
            let refs: Vec<Vec<String>> = task.examples.iter().map(|e| e.references.clone()).collect();
            corpus_bleu(&preds, &refs)?
        }
        _ => predictions.iter().map(|p| p.score).sum::<f64>() / predictions.len() as f64,
    };
    Ok(TaskRun {
        task: task.name.clone(),
        category,
        metric_name: category.metric(),
        raw,
        predictions,
    })
}

/// Mean of the descending-sorted logits at every greedy decoding step of
/// every prompt, truncated to the top `top_k` ranks.
pub fn logit_margin_profile(
    model: &dyn LogitSource,
    prompts: &[TokenSequence],
    steps: usize,
    top_k: usize,
) -> Result<Vec<f64>> {
    let k = top_k.min(model.vocab_size());
    let per_prompt: Vec<(Vec<f64>, usize)> = prompts
        .par_iter()
        .map(|p| -> Result<(Vec<f64>, usize)> {
            let mut acc = vec![0.0; k];
            let mut n = 0;
            let mut seq = p.to_vec();
            for _ in 0..steps {
                let mut logits = model.next_logits(&seq)?.0;
                let next = argmax(&logits) as TokenId;
                logits.sort_by(|a, b| b.total_cmp(a));
                for (a, l) in acc.iter_mut().zip(&logits) {
                    *a += l;
                }
                n += 1;
                seq.push(next);
                if next == crate::corpus::EOS {
                    break;
                }
            }
            Ok((acc, n))
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; k];
    let mut n = 0;
    for (acc, m) in per_prompt {
        for (t, a) in total.iter_mut().zip(acc) {
            *t += a;
        }
        n += m;
    }
    if n == 0 {
        return Ok(total);
    }
    Ok(total.into_iter().map(|t| t / n as f64).collect())
}

pub fn write_profile_csv<W: Write>(profile: &[f64], mut out: W) -> std::io::Result<()> {
    writeln!(out, "rank,mean_logit")?;
    for (i, v) in profile.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::FnSource;
    use crate::watermark::WatermarkSpec;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&["yes no maybe answer the cat dog ."], 1).unwrap()
    }

    fn cls(prompt: &str, gold: usize) -> TaskExample {
        TaskExample {
            category: Category::Cls,
            prompt: prompt.into(),
            labels: vec!["yes".into(), "no".into()],
            choices: vec![],
            references: vec![],
            gold_index: Some(gold),
        }
    }

    #[test]
    fn category_mismatch() {
        let v = vocab();
        let m = FnSource::new(v.len(), |_| vec![0.0; 11]);
        let mut e = cls("answer", 0);
        e.category = Category::Mcq;
        assert!(matches!(
            cls_predict(&m, None, &v, &e),
            Err(Error::CategoryMismatch { .. })
        ));
    }

    #[test]
    fn saturated_label_boost_wins() {
        let v = vocab();
        let size = v.len();
        let yes = v.id("yes").unwrap() as usize;
        let no = v.id("no").unwrap();
        let m = FnSource::new(size, move |_| {
            let mut l = vec![0.0; size];
            l[yes] = 5.0;
            l
        });
        let e = cls("answer", 0);
        assert_eq!(cls_predict(&m, None, &v, &e).unwrap(), 0);
        // find a key whose partition after "answer" greens "no" but not "yes"
        let answer = v.id("answer").unwrap();
        let key = (0..1000u64)
            .find(|&k| {
                let s = WatermarkSpec::kgw(0.5, 50.0, k).unwrap();
                let p = crate::watermark::kgw_partition(&s, answer, size).unwrap();
                p.is_green(no) && !p.is_green(yes as TokenId)
            })
            .unwrap();
        let w = Watermarker::new(WatermarkSpec::kgw(0.5, 50.0, key).unwrap(), size).unwrap();
        assert_eq!(cls_predict(&m, Some(&w), &v, &e).unwrap(), 1);
    }

    #[test]
    fn baselines() {
        let binary = vec![cls("a", 0), cls("b", 1)];
        assert_eq!(random_baseline(&binary).unwrap(), 0.5);
        let mcq = TaskExample {
            category: Category::Mcq,
            prompt: "q".into(),
            labels: vec![],
            choices: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            references: vec![],
            gold_index: Some(0),
        };
        assert_eq!(random_baseline(&[mcq.clone(), mcq.clone()]).unwrap(), 0.25);
        let lgen = TaskExample {
            category: Category::Lgen,
            prompt: "p".into(),
            labels: vec![],
            choices: vec![],
            references: vec!["r".into()],
            gold_index: None,
        };
        assert_eq!(random_baseline(std::slice::from_ref(&lgen)).unwrap(), 0.0);
        assert!(matches!(
            random_baseline(&[lgen, mcq]),
            Err(Error::MixedCategories(..))
        ));
    }

    #[test]
    fn normalized_examples() {
        assert_eq!(normalized_score(0.8, 0.8, 0.5).unwrap(), 1.0);
        assert_eq!(normalized_score(0.5, 0.8, 0.5).unwrap(), 0.0);
        assert!((normalized_score(0.7, 0.8, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(normalized_score(0.3, 0.8, 0.5).unwrap() < 0.0);
        assert!(normalized_score(0.9, 0.8, 0.5).unwrap() > 1.0);
        assert!(matches!(
            normalized_score(0.7, 0.5, 0.5),
            Err(Error::DegenerateBaseline(_))
        ));
    }

    #[test]
    fn one_hot_profile_margin() {
        let m = FnSource::new(4, |_| vec![-10.0, 3.0, -10.0, -10.0]);
        let p = logit_margin_profile(&m, &[vec![1].into()], 5, 4).unwrap();
        assert_eq!(p, vec![3.0, -10.0, -10.0, -10.0]);
        assert_eq!(p[0] - p[3], 13.0);
        let flat = FnSource::new(4, |_| vec![0.5; 4]);
        let p = logit_margin_profile(&flat, &[vec![1].into()], 5, 4).unwrap();
        assert!(p.iter().all(|&x| x == 0.5));
    }
}
