//! Deterministic synthetic corpus and task suite.
//!
//! Everything is generated from a seed, so the data needs no download and
//! two runs see identical bytes. The corpus mixes free narrative text with
//! documents that teach the n-gram model the answers of each task:
//!
//! * `yesno`: binary questions whose answer depends on a cue word, about
//!   62% "yes".
//! * `verdict`: three-way premise/verdict items; "neither" is gold for 6%
//!   of test items, yet the corpus gives it a modest share after every cue.
//! * `facts`: short-answer prompts like "the color of tavoli is".
//! * `passages`: memorized paragraphs to be continued.
//! * `mcq_short`, `mcq_long`, `mcq_mixed`: pick the memorized continuation
//!   among fluent distractors of the same length.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::lm::{train_ngram, NGramConfig, NGramModel};
use crate::taskeval::{Category, Task, TaskExample};

pub const DEFAULT_SEED: u64 = 20240611;

const ADJECTIVES: &[&str] = &[
    "red", "old", "quiet", "small", "bright", "cold", "heavy", "green", "young", "dark", "warm", "tall",
    "soft", "brave", "lazy", "proud", "wild", "calm", "sharp", "kind", "rough", "pale", "loud", "swift",
    "thin", "wise", "busy", "gentle", "rare", "silver", "golden", "empty", "narrow", "broad", "hidden",
    "sleepy", "clever", "honest", "strange", "humble",
];

const NOUNS: &[&str] = &[
    "fox", "river", "tree", "house", "child", "boat", "garden", "stone", "bird", "road", "window", "farmer",
    "village", "lamp", "horse", "bridge", "cloud", "market", "door", "teacher", "forest", "kettle", "wagon",
    "hill", "letter", "painter", "harbor", "field", "candle", "sailor", "tower", "goat", "mirror", "baker",
    "meadow", "owl", "ladder", "singer", "valley", "basket", "miller", "pond", "chair", "soldier", "orchard",
    "cat", "drum", "king", "island", "rope", "clock", "shepherd", "well", "fence", "poet", "storm", "barn",
    "queen", "cart", "lantern",
];

const VERBS: &[&str] = &[
    "watched",
    "carried",
    "found",
    "crossed",
    "painted",
    "followed",
    "lifted",
    "opened",
    "passed",
    "visited",
    "pulled",
    "greeted",
    "built",
    "chased",
    "cleaned",
    "noticed",
    "pushed",
    "fixed",
    "warned",
    "answered",
    "touched",
    "guarded",
    "counted",
    "remembered",
    "called",
    "covered",
    "reached",
    "helped",
    "shaped",
    "sold",
    "bought",
    "heard",
    "moved",
    "kept",
    "left",
    "named",
    "praised",
    "tested",
    "wrapped",
    "served",
];

const PREPOSITIONS: &[&str] = &[
    "near", "behind", "under", "beside", "beyond", "across", "inside", "above",
];

const ADVERBS: &[&str] = &[
    "slowly", "quickly", "softly", "often", "rarely", "gladly", "quietly", "boldly", "early", "later",
];

const RELATIONS: &[&str] = &[
    "color", "capital", "leader", "river", "song", "metal", "flower", "festival", "language", "mountain",
];

const SYLLABLES: &[&str] = &[
    "ba", "de", "fi", "go", "ku", "la", "me", "ni", "po", "ru", "sa", "te", "vi", "wo", "za", "ro", "mu",
    "ke", "di", "na", "tu", "shi", "lo", "ver", "pa", "qui", "xo", "bre", "sta", "gri",
];

/// Mean option lengths (in words) bounding the `mcq_mixed` buckets.
pub const MCQ_BUCKET_EDGES: &[f64] = &[4.0, 8.0, 16.0, 32.0];

#[derive(Debug, Clone, PartialEq)]
pub struct BundleConfig {
    pub seed: u64,
    pub narrative_docs: usize,
    pub yesno_cues: usize,
    pub yesno_docs_per_cue: usize,
    pub verdict_cues: usize,
    pub verdict_docs_per_cue: usize,
    pub facts: usize,
    pub fact_repeats: usize,
    pub passages: usize,
    pub passage_repeats: usize,
    /// Times each correct MCQ option appears in the corpus.
    pub mcq_repeats: usize,
    pub mcq_short: usize,
    pub mcq_long: usize,
    pub mcq_mixed_per_bucket: usize,
    pub mcq_choices: usize,
    pub cls_test_size: usize,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            narrative_docs: 1200,
            yesno_cues: 40,
            yesno_docs_per_cue: 10,
            verdict_cues: 30,
            verdict_docs_per_cue: 20,
            facts: 100,
            fact_repeats: 3,
            passages: 20,
            passage_repeats: 4,
            mcq_repeats: 2,
            mcq_short: 200,
            mcq_long: 200,
            mcq_mixed_per_bucket: 150,
            mcq_choices: 4,
            cls_test_size: 200,
        }
    }
}

/// The generated corpus plus every task.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub documents: Vec<String>,
    pub tasks: Vec<Task>,
}

impl Bundle {
    pub fn generate(config: &BundleConfig) -> Self {
        Generator::new(config).run()
    }

    pub fn task(&self, name: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.name == name)
    }

    /// Trains an n-gram model of the given order on the corpus, with every
    /// token kept in the vocabulary.
    pub fn train(&self, order: usize) -> Result<NGramModel> {
        let vocab = Vocabulary::build(&self.documents, 1)?;
        let docs: Vec<TokenSequence> = self.documents.iter().map(|d| vocab.encode_document(d)).collect();
        train_ngram(&vocab, &docs, NGramConfig::with_order(order))
    }

    /// Writes `corpus.txt` and `tasks/<name>.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let tasks = dir.join("tasks");
        fs::create_dir_all(&tasks).map_err(|e| Error::io(&tasks, e))?;
        let corpus = dir.join("corpus.txt");
        let mut text = self.documents.join("\n");
        text.push('\n');
        fs::write(&corpus, text).map_err(|e| Error::io(&corpus, e))?;
        for t in &self.tasks {
            t.save(&tasks.join(format!("{}.jsonl", t.name)))?;
        }
        Ok(())
    }
}

/// The default bundle.
pub fn bundled() -> Bundle {
    Bundle::generate(&BundleConfig::default())
}

struct Generator<'a> {
    cfg: &'a BundleConfig,
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
    docs: Vec<String>,
    tasks: Vec<Task>,
}

#[derive(Clone, Copy)]
enum Slot {
    The,
    Adj,
    Noun,
    Verb,
    Prep,
    And,
    Adv,
}

const PATTERN: &[Slot] = &[
    Slot::The,
    Slot::Adj,
    Slot::Noun,
    Slot::Verb,
    Slot::The,
    Slot::Noun,
    Slot::Prep,
    Slot::The,
    Slot::Adj,
    Slot::Noun,
    Slot::And,
    Slot::Adv,
];

impl<'a> Generator<'a> {
    fn new(cfg: &'a BundleConfig) -> Self {
        let used = ADJECTIVES
            .iter()
            .chain(NOUNS)
            .chain(VERBS)
            .chain(PREPOSITIONS)
            .chain(ADVERBS)
            .chain(RELATIONS)
            .map(|s| s.to_string())
            .collect();
        Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            used,
            docs: Vec::new(),
            tasks: Vec::new(),
        }
    }

    fn pick(&mut self, words: &[&'static str]) -> &'static str {
        words[self.rng.gen_range(0..words.len())]
    }

    /// Fresh pseudo-words that collide with nothing generated so far.
    fn coin(&mut self, n: usize) -> Vec<String> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let syllables = self.rng.gen_range(2..=3);
            let w: String = (0..syllables).map(|_| self.pick(SYLLABLES)).collect();
            if self.used.insert(w.clone()) {
                out.push(w);
            }
        }
        out
    }

    fn slot_word(&mut self, slot: Slot) -> &'static str {
        match slot {
            Slot::The => "the",
            Slot::Adj => self.pick(ADJECTIVES),
            Slot::Noun => self.pick(NOUNS),
            Slot::Verb => self.pick(VERBS),
            Slot::Prep => self.pick(PREPOSITIONS),
            Slot::And => "and",
            Slot::Adv => self.pick(ADVERBS),
        }
    }

    /// `len` words of the narrative pattern starting at `offset`.
    fn phrase(&mut self, offset: usize, len: usize) -> Vec<&'static str> {
        (0..len)
            .map(|i| self.slot_word(PATTERN[(offset + i) % PATTERN.len()]))
            .collect()
    }

    fn sentence(&mut self) -> String {
        // lengths at which the pattern ends on a noun
        let len = [6, 10, 18, 22][self.rng.gen_range(0..4)];
        format!("{} .", self.phrase(0, len).join(" "))
    }

    fn narrative(&mut self) {
        for _ in 0..self.cfg.narrative_docs {
            let n = self.rng.gen_range(3..=6);
            let doc: Vec<String> = (0..n).map(|_| self.sentence()).collect();
            self.docs.push(doc.join(" "));
        }
    }

    fn question_words(&mut self) -> String {
        format!(
            "is the {} {} {}",
            self.pick(ADJECTIVES),
            self.pick(NOUNS),
            self.pick(VERBS)
        )
    }

    fn example(category: Category, prompt: String) -> TaskExample {
        TaskExample {
            category,
            prompt,
            labels: vec![],
            choices: vec![],
            references: vec![],
            gold_index: None,
        }
    }

    fn yesno(&mut self) {
        let cues = self.coin(self.cfg.yesno_cues);
        // 60% of cues lean yes at 0.85, the rest lean no at 0.75
        let rates: Vec<f64> = (0..cues.len())
            .map(|i| if i * 5 < cues.len() * 3 { 0.85 } else { 0.25 })
            .collect();
        let n = self.cfg.yesno_docs_per_cue;
        for (cue, &rate) in cues.iter().zip(&rates) {
            let yes = (rate * n as f64).round() as usize;
            for j in 0..n {
                let q = self.question_words();
                let answer = if j < yes { "yes" } else { "no" };
                self.docs
                    .push(format!("question : {q} ? {cue} answer {answer} ."));
            }
        }
        let examples = (0..self.cfg.cls_test_size)
            .map(|_| {
                let c = self.rng.gen_range(0..cues.len());
                let q = self.question_words();
                let gold = if self.rng.gen_bool(rates[c]) { 0 } else { 1 };
                TaskExample {
                    labels: vec!["yes".into(), "no".into()],
                    gold_index: Some(gold),
                    ..Self::example(Category::Cls, format!("question : {q} ? {} answer", cues[c]))
                }
            })
            .collect();
        self.tasks.push(Task::new("yesno", examples));
    }

    fn verdict(&mut self) {
        let cues = self.coin(self.cfg.verdict_cues);
        let n = self.cfg.verdict_docs_per_cue;
        // kind 0 leans true, kind 1 leans false, kind 2 leans neither
        let kind = |i: usize| if i < 2 { 2 } else { i % 2 };
        let counts = |k: usize| -> [usize; 3] {
            let (major, minor, neither) = (n * 7 / 10, n / 10, n - n * 7 / 10 - n / 10);
            match k {
                0 => [major, minor, neither],
                1 => [minor, major, neither],
                _ => [n / 5, n / 5, n - 2 * (n / 5)],
            }
        };
        const LABELS: [&str; 3] = ["true", "false", "neither"];
        for (i, cue) in cues.iter().enumerate() {
            let c = counts(kind(i));
            for (label, &times) in LABELS.iter().zip(&c) {
                for _ in 0..times {
                    let premise = self.phrase(0, 6).join(" ");
                    self.docs
                        .push(format!("premise : {premise} . {cue} verdict {label} ."));
                }
            }
        }
        let size = self.cfg.cls_test_size;
        let minority = (size as f64 * 0.06).round() as usize;
        let mut examples: Vec<TaskExample> = (0..size)
            .map(|j| {
                let (c, gold) = if j < minority {
                    (self.rng.gen_range(0..2), 2)
                } else {
                    let c = self.rng.gen_range(2..cues.len());
                    let majority = kind(c);
                    // a few items disagree with their cue
                    let gold = if self.rng.gen_bool(0.08) {
                        1 - majority
                    } else {
                        majority
                    };
                    (c, gold)
                };
                let premise = self.phrase(0, 6).join(" ");
                TaskExample {
                    labels: LABELS.iter().map(|s| s.to_string()).collect(),
                    gold_index: Some(gold),
                    ..Self::example(
                        Category::Cls,
                        format!("premise : {premise} . {} verdict", cues[c]),
                    )
                }
            })
            .collect();
        examples.shuffle(&mut self.rng);
        self.tasks.push(Task::new("verdict", examples));
    }

    fn facts(&mut self) {
        let entities = self.coin(self.cfg.facts);
        let values = self.coin(60);
        let facts: Vec<(String, String, String)> = entities
            .into_iter()
            .map(|e| {
                let rel = self.pick(RELATIONS).to_string();
                let value = values[self.rng.gen_range(0..values.len())].clone();
                (rel, e, value)
            })
            .collect();
        let mut mentions: Vec<usize> = (0..facts.len())
            .flat_map(|i| std::iter::repeat_n(i, self.cfg.fact_repeats))
            .collect();
        mentions.shuffle(&mut self.rng);
        for chunk in mentions.chunks(4) {
            let doc: Vec<String> = chunk
                .iter()
                .map(|&i| format!("the {} of {} is {} .", facts[i].0, facts[i].1, facts[i].2))
                .collect();
            self.docs.push(doc.join(" "));
        }
        let examples = facts
            .iter()
            .map(|(rel, e, v)| TaskExample {
                references: vec![v.clone()],
                ..Self::example(Category::Sgen, format!("the {rel} of {e} is"))
            })
            .collect();
        self.tasks.push(Task::new("facts", examples));
    }

    fn passages(&mut self) {
        let lexicon = self.coin(150);
        let mut examples = Vec::new();
        for _ in 0..self.cfg.passages {
            let len = self.rng.gen_range(40..=60);
            let mut words = Vec::with_capacity(len + len / 8);
            for i in 0..len {
                words.push(lexicon[self.rng.gen_range(0..lexicon.len())].clone());
                if i % 9 == 8 && i + 1 < len {
                    words.push(".".into());
                }
            }
            words.push(".".into());
            let text = words.join(" ");
            for _ in 0..self.cfg.passage_repeats {
                self.docs.push(text.clone());
            }
            examples.push(TaskExample {
                references: vec![words[8..].join(" ")],
                ..Self::example(Category::Lgen, words[..8].join(" "))
            });
        }
        self.tasks.push(Task::new("passages", examples));
    }

    fn mcq_item(&mut self, len: usize) -> TaskExample {
        let offset = self.rng.gen_range(0..PATTERN.len());
        let topic = format!(
            "question : what did the {} {} see ? answer :",
            self.pick(ADJECTIVES),
            self.pick(NOUNS)
        );
        let correct = self.phrase(offset, len).join(" ");
        for _ in 0..self.cfg.mcq_repeats {
            self.docs.push(format!("{topic} {correct} ."));
        }
        let mut choices = vec![correct.clone()];
        while choices.len() < self.cfg.mcq_choices {
            let d = self.phrase(offset, len).join(" ");
            if !choices.contains(&d) {
                choices.push(d);
            }
        }
        choices.shuffle(&mut self.rng);
        let gold = choices
            .iter()
            .position(|c| c == &correct)
            .expect("correct option present");
        TaskExample {
            choices,
            gold_index: Some(gold),
            ..Self::example(Category::Mcq, topic)
        }
    }

    fn mcq(&mut self) {
        let short = (0..self.cfg.mcq_short)
            .map(|_| {
                let len = self.rng.gen_range(2..=6);
                self.mcq_item(len)
            })
            .collect();
        self.tasks.push(Task::new("mcq_short", short));
        let long = (0..self.cfg.mcq_long)
            .map(|_| {
                let len = self.rng.gen_range(24..=64);
                self.mcq_item(len)
            })
            .collect();
        self.tasks.push(Task::new("mcq_long", long));
        let mut mixed = Vec::new();
        let mut edges = MCQ_BUCKET_EDGES.to_vec();
        edges.push(65.0);
        for w in edges.windows(2) {
            for _ in 0..self.cfg.mcq_mixed_per_bucket {
                let len = self.rng.gen_range(w[0] as usize..w[1] as usize);
                mixed.push(self.mcq_item(len));
            }
        }
        mixed.shuffle(&mut self.rng);
        self.tasks.push(Task::new("mcq_mixed", mixed));
    }

    fn run(mut self) -> Bundle {
        self.narrative();
        self.yesno();
        self.verdict();
        self.facts();
        self.passages();
        self.mcq();
        let mut documents = self.docs;
        documents.shuffle(&mut self.rng);
        Bundle {
            documents,
            tasks: self.tasks,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_large_enough() {
        let a = bundled();
        let b = bundled();
        assert_eq!(a, b);
        assert!(a.documents.len() >= 2000);
        for t in &a.tasks {
            t.category().unwrap();
        }
    }

    #[test]
    fn verdict_minority_share() {
        let b = bundled();
        let t = b.task("verdict").unwrap();
        let neither = t.examples.iter().filter(|e| e.gold_index == Some(2)).count();
        assert_eq!(neither as f64 / t.examples.len() as f64, 0.06);
        let yes = b.task("yesno").unwrap();
        let share = yes.examples.iter().filter(|e| e.gold_index == Some(0)).count() as f64
            / yes.examples.len() as f64;
        assert!((0.5..0.75).contains(&share), "{share}");
    }

    #[test]
    fn mcq_lengths() {
        let b = bundled();
        for e in &b.task("mcq_short").unwrap().examples {
            assert!((2.0..=6.0).contains(&e.mean_choice_words()));
        }
        for e in &b.task("mcq_mixed").unwrap().examples {
            assert!((4.0..=64.0).contains(&e.mean_choice_words()));
        }
    }
}
