//! Text ingestion, word-level tokenization and vocabulary management.

use std::collections::HashMap;
use std::fs;
use std::ops::Deref;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const UNK: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;

const RESERVED: [&str; 3] = ["<unk>", "<s>", "</s>"];

/// Splits text into lowercase word and punctuation tokens.
///
/// Runs of alphanumeric characters form one token; every other
/// non-whitespace character is a token on its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.extend(std::iter::once(ch.to_lowercase().collect::<String>()));
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Ordered list of token ids over some [`Vocabulary`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn push(&mut self, id: TokenId) {
        self.0.push(id);
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenSequence {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}

/// Dense bijection between token strings and ids.
///
/// Ids 0, 1, 2 are always `<unk>`, `<s>` and `</s>`. The remaining tokens
/// follow in frequency-descending order with lexicographic tie-breaks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
    min_count: usize,
    hash: String,
}

impl Vocabulary {
    /// Builds a vocabulary from raw documents keeping tokens seen at least
    /// `min_count` times.
    pub fn build<S: AsRef<str>>(documents: &[S], min_count: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in documents {
            for w in split_words(doc.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !RESERVED.contains(&w.as_str()))
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(w, _)| w))
            .collect();
        Ok(Self::from_tokens(tokens, min_count))
    }

    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self {
            tokens,
            index,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Tokenizes text; unknown words map to [`UNK`].
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .into()
    }

    /// `<s>` followed by the tokens of `text`.
    pub fn encode_prompt(&self, text: &str) -> TokenSequence {
        let mut ids = vec![BOS];
        ids.extend(self.tokenize(text).0);
        ids.into()
    }

    /// `<s>`, the tokens of `text`, `</s>`.
    pub fn encode_document(&self, text: &str) -> TokenSequence {
        let mut seq = self.encode_prompt(text);
        seq.push(EOS);
        seq
    }

    /// Joins tokens with single spaces, dropping sequence markers.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id != BOS && id != EOS)
            .map(|&id| self.token(id).unwrap_or(RESERVED[0]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The canonical form `detokenize(tokenize(text))` is expected to equal.
    pub fn normalize(&self, text: &str) -> String {
        split_words(text)
            .into_iter()
            .map(|w| {
                if self.index.contains_key(&w) && !RESERVED.contains(&w.as_str()) {
                    w
                } else {
                    RESERVED[0].to_string()
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> String {
        let file = VocabularyFile {
            tokens: self.tokens.clone(),
            min_count: self.min_count,
            hash: self.hash(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabularyFile = serde_json::from_str(text)
            .map_err(|e| Error::MalformedResponse(format!("vocabulary JSON: {e}")))?;
        if file.tokens.len() < RESERVED.len() || file.tokens[..RESERVED.len()] != RESERVED.map(String::from) {
            return Err(Error::InvalidParameter(
                "vocabulary must start with <unk>, <s>, </s>".into(),
            ));
        }
        let vocab = Self::from_tokens(file.tokens, file.min_count);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::InvalidParameter("duplicate vocabulary tokens".into()));
        }
        if vocab.hash() != file.hash {
            return Err(Error::VocabularyMismatch {
                local: vocab.hash(),
                remote: file.hash,
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub(crate) fn check(&self, seq: &[TokenId]) -> Result<()> {
        match seq.iter().find(|&&id| id as usize >= self.len()) {
            Some(&id) => Err(Error::TokenOutOfRange { id, size: self.len() }),
            None => Ok(()),
        }
    }
}

/// Free-function form of [`Vocabulary::build`].
pub fn build_vocabulary<S: AsRef<str>>(documents: &[S], min_count: usize) -> Result<Vocabulary> {
    Vocabulary::build(documents, min_count)
}

/// Reads one document per line from `.txt`, or the `text` field of each
/// record from `.jsonl`. Blank lines are skipped.
pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let jsonl = path.extension().is_some_and(|e| e == "jsonl");
    let mut docs = Vec::new();
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        if jsonl {
            #[derive(Deserialize)]
            struct Record {
                text: String,
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| Error::json(path, e))?;
            docs.push(rec.text);
        } else {
            docs.push(line.to_string());
        }
    }
    Ok(docs)
}

/// Disjoint calibration/perplexity samples drawn from one document pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub calibration_ids: Vec<usize>,
    pub perplexity_ids: Vec<usize>,
    pub calibration_prefixes: Vec<TokenSequence>,
    pub perplexity_snippets: Vec<TokenSequence>,
}

impl CorpusSplit {
    /// Cuts every calibration prefix down to at most `len` tokens.
    pub fn truncate_prefixes(mut self, len: usize) -> Self {
        for p in &mut self.calibration_prefixes {
            p.0.truncate(len);
        }
        self
    }

    /// Cuts every perplexity snippet down to at most `len` tokens.
    pub fn truncate_snippets(mut self, len: usize) -> Self {
        for s in &mut self.perplexity_snippets {
            s.0.truncate(len);
        }
        self
    }
}

/// Seeded sampling without replacement of `n_calib + n_ppl` documents.
pub fn split_corpus<S: AsRef<str>>(
    documents: &[S],
    vocab: &Vocabulary,
    n_calib: usize,
    n_ppl: usize,
    seed: u64,
) -> Result<CorpusSplit> {
    let needed = n_calib + n_ppl;
    if documents.len() < needed {
        return Err(Error::InsufficientDocuments {
            needed,
            available: documents.len(),
        });
    }
    let mut order: Vec<usize> = (0..documents.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let calibration_ids = order[..n_calib].to_vec();
    let perplexity_ids = order[n_calib..needed].to_vec();
    let encode = |ids: &[usize]| -> Vec<TokenSequence> {
        ids.iter()
            .map(|&i| vocab.encode_document(documents[i].as_ref()))
            .collect()
    };
    Ok(CorpusSplit {
        calibration_prefixes: encode(&calibration_ids),
        perplexity_snippets: encode(&perplexity_ids),
        calibration_ids,
        perplexity_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_count_one_keeps_everything() {
        let v = Vocabulary::build(&["a b", "a c"], 1).unwrap();
        assert_eq!(v.tokens(), ["<unk>", "<s>", "</s>", "a", "b", "c"]);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn min_count_two_keeps_only_repeated() {
        let v = Vocabulary::build(&["a b", "a c"], 2).unwrap();
        assert_eq!(v.tokens(), ["<unk>", "<s>", "</s>", "a"]);
    }

    #[test]
    fn nothing_survives_threshold() {
        assert!(matches!(Vocabulary::build(&["a b"], 5), Err(Error::EmptyCorpus)));
        assert!(matches!(
            Vocabulary::build::<&str>(&[], 1),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn tokenize_cases() {
        let v = Vocabulary::build(&["a b", "a c"], 1).unwrap();
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.tokenize("a b").ids(), [3, 4]);
        assert_eq!(v.tokenize("a zebra c").ids(), [3, UNK, 5]);
    }

    #[test]
    fn punctuation_splits() {
        assert_eq!(split_words("Hello, World!"), ["hello", ",", "world", "!"]);
        assert_eq!(split_words("  x\t\ny  "), ["x", "y"]);
        // reserved strings never come out of the splitter as one token
        assert_eq!(split_words("<s>"), ["<", "s", ">"]);
    }

    #[test]
    fn json_roundtrip_checks_hash() {
        let v = Vocabulary::build(&["a b", "a c"], 1).unwrap();
        let json = v.to_json();
        assert_eq!(Vocabulary::from_json(&json).unwrap(), v);
        let tampered = json.replace("\"c\"", "\"z\"");
        assert!(matches!(
            Vocabulary::from_json(&tampered),
            Err(Error::VocabularyMismatch { .. })
        ));
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let docs: Vec<String> = (0..400).map(|i| format!("doc {i}")).collect();
        let v = Vocabulary::build(&docs, 1).unwrap();
        let a = split_corpus(&docs, &v, 200, 200, 9).unwrap();
        let b = split_corpus(&docs, &v, 200, 200, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.calibration_ids.len(), 200);
        assert_eq!(a.perplexity_ids.len(), 200);
        let calib: std::collections::HashSet<_> = a.calibration_ids.iter().collect();
        assert!(a.perplexity_ids.iter().all(|i| !calib.contains(i)));
        assert!(matches!(
            split_corpus(&docs, &v, 300, 101, 9),
            Err(Error::InsufficientDocuments { needed: 401, .. })
        ));
    }
}
