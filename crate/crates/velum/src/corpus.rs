//! Text ingestion, word-level tokenization, vocabulary management, and
//! deterministic corpus splitting.
//!
//! The tokenizer is deliberately simple: lowercase, split on whitespace,
//! keep punctuation as single-character tokens. Two classes of strings pass
//! through unsplit: the four reserved control tokens and any detected
//! personal-identifier surface (phone / email / URL), so that identifiers
//! stay aligned to token boundaries and survive a decode/encode round trip.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pii;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const END_OF_TEXT: &str = "<|endoftext|>";

/// Reserved control tokens, pinned to ids 0..4 in every vocabulary.
pub const RESERVED_TOKENS: [&str; 4] = [UNK, BOS, EOS, END_OF_TEXT];

pub const UNK_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const END_OF_TEXT_ID: u32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid token id {id} (vocabulary size {vocab})")]
    InvalidTokenId { id: u32, vocab: usize },
    #[error("vocabulary size must be at least {min}, got {got}")]
    VocabTooSmall { min: usize, got: usize },
    #[error("duplicate token {0:?} in vocabulary")]
    DuplicateToken(String),
    #[error("vocabulary must start with the reserved tokens {RESERVED_TOKENS:?}")]
    MissingReserved,
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("cannot split a corpus of {0} documents into 3 parts")]
    TooFewDocuments(usize),
    #[error("duplicate document id {0}")]
    DuplicateDocId(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad corpus metadata: {0}")]
    BadMetadata(#[from] serde_json::Error),
}

/// Splits raw text into lowercase word-level tokens.
///
/// Alphanumeric runs form one token, any other non-whitespace character is a
/// single-character token, reserved tokens and personal-identifier surfaces
/// are kept whole (identifiers are lowercased like everything else).
pub fn tokenize(text: &str) -> Vec<String> {
    let spans = pii::detect_pii(text);
    let mut tokens = Vec::new();
    let mut cursor = 0usize;
    for span in &spans {
        tokenize_plain(&text[cursor..span.start], &mut tokens);
        tokens.push(span.surface.to_lowercase());
        cursor = span.end;
    }
    tokenize_plain(&text[cursor..], &mut tokens);
    tokens
}

fn tokenize_plain(segment: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = segment.to_lowercase().chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '<' {
            if let Some(reserved) = match_reserved(&chars[i..]) {
                out.push(reserved.to_string());
                i += reserved.chars().count();
                continue;
            }
        }
        if c.is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
}

fn match_reserved(chars: &[char]) -> Option<&'static str> {
    RESERVED_TOKENS.iter().copied().find(|tok| {
        let t: Vec<char> = tok.chars().collect();
        chars.len() >= t.len() && chars[..t.len()] == t[..]
    })
}

/// A dense bijective token <-> id mapping with the four reserved tokens at
/// ids 0..4.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}
impl Eq for Vocabulary {}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = CorpusError;
    fn try_from(tokens: Vec<String>) -> Result<Self, CorpusError> {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Vec<String> {
        v.tokens
    }
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.len() < RESERVED_TOKENS.len()
            || RESERVED_TOKENS.iter().zip(&tokens).any(|(r, t)| r != t)
        {
            return Err(CorpusError::MissingReserved);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as u32).is_some() {
                return Err(CorpusError::DuplicateToken(tok.clone()));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, serde_json::to_string_pretty(&self.tokens)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let tokens: Vec<String> = serde_json::from_str(&fs::read_to_string(path)?)?;
        Vocabulary::from_tokens(tokens)
    }
}

/// Builds a vocabulary of the reserved tokens plus the `max_size - 4` most
/// frequent corpus tokens, frequency ties broken lexicographically.
pub fn build_vocab(corpus: &Corpus, max_size: usize) -> Result<Vocabulary, CorpusError> {
    let min = RESERVED_TOKENS.len() + 1;
    if max_size < min {
        return Err(CorpusError::VocabTooSmall { min, got: max_size });
    }
    if corpus.documents.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut freq: HashMap<String, u64> = HashMap::new();
    for doc in &corpus.documents {
        for tok in tokenize(&doc.raw_text) {
            if !RESERVED_TOKENS.contains(&tok.as_str()) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let mut by_freq: Vec<(String, u64)> = freq.into_iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|t| t.to_string()).collect();
    tokens.extend(
        by_freq
            .into_iter()
            .take(max_size - RESERVED_TOKENS.len())
            .map(|(t, _)| t),
    );
    Vocabulary::from_tokens(tokens)
}

/// A sequence of token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.ids
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(ids: Vec<u32>) -> Self {
        Self { ids }
    }
}

/// Lowercases, tokenizes and maps to ids; out-of-vocabulary tokens map to
/// `<unk>`. Total: never fails.
pub fn encode_text(vocab: &Vocabulary, text: &str) -> TokenSeq {
    TokenSeq::new(
        tokenize(text)
            .iter()
            .map(|t| vocab.id_of(t).unwrap_or(UNK_ID))
            .collect(),
    )
}

/// Renders a token sequence as text, tokens joined by single spaces.
pub fn decode_tokens(vocab: &Vocabulary, seq: &TokenSeq) -> Result<String, CorpusError> {
    let mut parts = Vec::with_capacity(seq.len());
    for &id in &seq.ids {
        match vocab.token(id) {
            Some(tok) => parts.push(tok),
            None => {
                return Err(CorpusError::InvalidTokenId {
                    id,
                    vocab: vocab.len(),
                })
            }
        }
    }
    Ok(parts.join(" "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Public,
    Private,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: u32,
    pub raw_text: String,
    #[serde(default)]
    pub tokens: TokenSeq,
    pub origin: Origin,
}

/// A list of documents with unique ids and a human-readable label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub label: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusMeta {
    label: String,
    origin: Origin,
}

impl Corpus {
    pub fn new(label: impl Into<String>, documents: Vec<Document>) -> Result<Self, CorpusError> {
        let mut seen = HashMap::new();
        for doc in &documents {
            if seen.insert(doc.id, ()).is_some() {
                return Err(CorpusError::DuplicateDocId(doc.id));
            }
        }
        Ok(Self {
            documents,
            label: label.into(),
        })
    }

    pub fn from_texts(
        label: impl Into<String>,
        origin: Origin,
        texts: impl IntoIterator<Item = String>,
    ) -> Self {
        let documents = texts
            .into_iter()
            .enumerate()
            .map(|(i, raw_text)| Document {
                id: i as u32,
                raw_text,
                tokens: TokenSeq::default(),
                origin,
            })
            .collect();
        Self {
            documents,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Returns a copy of the corpus with every document's token sequence
    /// bound to `vocab`.
    pub fn with_tokens(&self, vocab: &Vocabulary) -> Corpus {
        let documents = self
            .documents
            .iter()
            .map(|d| Document {
                id: d.id,
                raw_text: d.raw_text.clone(),
                tokens: encode_text(vocab, &d.raw_text),
                origin: d.origin,
            })
            .collect();
        Corpus {
            documents,
            label: self.label.clone(),
        }
    }

    fn meta_path(path: &Path) -> PathBuf {
        let mut name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        name.push_str(".meta.json");
        path.with_file_name(name)
    }

    /// Writes the corpus as one text file (documents separated by a blank
    /// line) plus an adjacent `<file>.meta.json` with label and origin.
    ///
    /// Document text must not itself contain blank lines.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let body: Vec<&str> = self.documents.iter().map(|d| d.raw_text.as_str()).collect();
        fs::write(path, body.join("\n\n"))?;
        let origin = self
            .documents
            .first()
            .map(|d| d.origin)
            .unwrap_or(Origin::Synthetic);
        let meta = CorpusMeta {
            label: self.label.clone(),
            origin,
        };
        fs::write(
            Self::meta_path(path),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path)?;
        let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(Self::meta_path(path))?)?;
        let texts = text
            .split("\n\n")
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_string);
        Ok(Corpus::from_texts(meta.label, meta.origin, texts))
    }
}

/// Deterministically shuffles and partitions a corpus into train/valid/eval.
///
/// Sizes are floor allocations of the ratios with the remainder assigned to
/// the train split.
pub fn split_corpus(
    corpus: &Corpus,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus), CorpusError> {
    let (r_train, r_valid, r_eval) = ratios;
    let all = [r_train, r_valid, r_eval];
    if all.iter().any(|r| *r <= 0.0) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(all));
    }
    let n = corpus.documents.len();
    if n < 3 {
        return Err(CorpusError::TooFewDocuments(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_valid = (r_valid * n as f64 + 1e-9).floor() as usize;
    let n_eval = (r_eval * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_valid - n_eval;

    let pick = |range: std::ops::Range<usize>, suffix: &str| Corpus {
        documents: order[range]
            .iter()
            .map(|&i| corpus.documents[i].clone())
            .collect(),
        label: format!("{}-{}", corpus.label, suffix),
    };
    Ok((
        pick(0..n_train, "train"),
        pick(n_train..n_train + n_valid, "valid"),
        pick(n_train + n_valid..n, "eval"),
    ))
}
