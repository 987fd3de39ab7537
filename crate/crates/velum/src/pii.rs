//! Detection of personal identifiers (phones, emails, URLs) and corpus
//! sanitization.
//!
//! Detection is a fixed regular-expression grammar: phones are 3-3-4 digit
//! groups separated by '-', '.' or ' ' with an optionally parenthesized area
//! code; emails are `local@domain.tld`; URLs are `http(s)://` followed by
//! non-space characters. Overlapping matches resolve by priority
//! URL > Email > Phone, then leftmost.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, TokenSeq, END_OF_TEXT};

pub const DUMMY_PHONE: &str = "123-456-789";
pub const DUMMY_EMAIL: &str = "john.doe@example.com";
pub const DUMMY_URL: &str = "https://example.com";

#[derive(Debug, thiserror::Error)]
pub enum PiiError {
    #[error("empty replacement pool for {0}")]
    EmptyPool(&'static str),
    #[error("bad pool file: {0}")]
    BadPoolFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PiiKind {
    Phone,
    Email,
    Url,
}

impl PiiKind {
    pub const ALL: [PiiKind; 3] = [PiiKind::Phone, PiiKind::Email, PiiKind::Url];

    pub fn name(self) -> &'static str {
        match self {
            PiiKind::Phone => "phone",
            PiiKind::Email => "email",
            PiiKind::Url => "url",
        }
    }

    // Overlap priority: URL > Email > Phone.
    fn priority(self) -> u8 {
        match self {
            PiiKind::Url => 0,
            PiiKind::Email => 1,
            PiiKind::Phone => 2,
        }
    }
}

/// One detected identifier: byte range into the source text plus the matched
/// surface.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PiiSpan {
    pub kind: PiiKind,
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

fn phone_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:\(\d{3}\)[-. ]?|\d{3}[-. ])\d{3}[-. ]\d{4}").unwrap())
}

fn email_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}").unwrap())
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"https?://[^\s]+").unwrap())
}

/// Finds all non-overlapping identifier spans in `text`, sorted by start
/// offset.
pub fn detect_pii(text: &str) -> Vec<PiiSpan> {
    let mut candidates = Vec::new();
    for (kind, re) in [
        (PiiKind::Url, url_re()),
        (PiiKind::Email, email_re()),
        (PiiKind::Phone, phone_re()),
    ] {
        for m in re.find_iter(text) {
            candidates.push(PiiSpan {
                kind,
                start: m.start(),
                end: m.end(),
                surface: m.as_str().to_string(),
            });
        }
    }
    candidates.sort_by_key(|s| (s.kind.priority(), s.start));
    let mut accepted: Vec<PiiSpan> = Vec::new();
    for c in candidates {
        if !accepted.iter().any(|a| c.start < a.end && a.start < c.end) {
            accepted.push(c);
        }
    }
    accepted.sort_by_key(|s| s.start);
    accepted
}

/// Distinct identifier surfaces per kind across a corpus.
pub fn unique_pii(corpus: &Corpus) -> BTreeMap<PiiKind, BTreeSet<String>> {
    let mut out: BTreeMap<PiiKind, BTreeSet<String>> =
        PiiKind::ALL.iter().map(|&k| (k, BTreeSet::new())).collect();
    for doc in &corpus.documents {
        for span in detect_pii(&doc.raw_text) {
            out.get_mut(&span.kind).unwrap().insert(span.surface);
        }
    }
    out
}

/// Replacement surfaces for the random-public strategy, one list per kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PiiPool {
    pub phones: Vec<String>,
    pub emails: Vec<String>,
    pub urls: Vec<String>,
}

impl PiiPool {
    pub fn for_kind(&self, kind: PiiKind) -> &[String] {
        match kind {
            PiiKind::Phone => &self.phones,
            PiiKind::Email => &self.emails,
            PiiKind::Url => &self.urls,
        }
    }

    fn for_kind_mut(&mut self, kind: PiiKind) -> &mut Vec<String> {
        match kind {
            PiiKind::Phone => &mut self.phones,
            PiiKind::Email => &mut self.emails,
            PiiKind::Url => &mut self.urls,
        }
    }

    /// Plain-text pool file: `[phone]` / `[email]` / `[url]` section headers,
    /// one surface per line.
    pub fn save(&self, path: &Path) -> Result<(), PiiError> {
        let mut out = String::new();
        for kind in PiiKind::ALL {
            out.push_str(&format!("[{}]\n", kind.name()));
            for surface in self.for_kind(kind) {
                out.push_str(surface);
                out.push('\n');
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PiiError> {
        let text = fs::read_to_string(path)?;
        let sections = parse_sections(&text)?;
        let mut pool = PiiPool::default();
        for (kind, lines) in sections {
            *pool.for_kind_mut(kind) = lines;
        }
        Ok(pool)
    }
}

/// Parses the shared section file format (`[phone]`/`[email]`/`[url]`
/// headers, one entry per line). Used for both replacement pools and attack
/// prompt banks.
pub(crate) fn parse_sections(text: &str) -> Result<BTreeMap<PiiKind, Vec<String>>, PiiError> {
    let mut out: BTreeMap<PiiKind, Vec<String>> = BTreeMap::new();
    let mut current: Option<PiiKind> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(match name {
                "phone" => PiiKind::Phone,
                "email" => PiiKind::Email,
                "url" => PiiKind::Url,
                other => {
                    return Err(PiiError::BadPoolFile(format!(
                        "unknown section [{other}] at line {}",
                        lineno + 1
                    )))
                }
            });
            continue;
        }
        match current {
            Some(kind) => out.entry(kind).or_default().push(line.to_string()),
            None => {
                return Err(PiiError::BadPoolFile(format!(
                    "entry before any section header at line {}",
                    lineno + 1
                )))
            }
        }
    }
    Ok(out)
}

/// How detected identifier spans are rewritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SanitizeStrategy {
    /// Replace every span with the `<|endoftext|>` token.
    EndOfText,
    /// Replace every span with a fixed dummy surface for its kind.
    DummyPii,
    /// Replace every span with a uniform draw from a pool of public
    /// surfaces, drawn independently per occurrence.
    RandomPublicPii { pool: PiiPool, seed: u64 },
}

impl SanitizeStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            SanitizeStrategy::EndOfText => "endoftext",
            SanitizeStrategy::DummyPii => "dummy",
            SanitizeStrategy::RandomPublicPii { .. } => "random-public",
        }
    }
}

fn dummy_for(kind: PiiKind) -> &'static str {
    match kind {
        PiiKind::Phone => DUMMY_PHONE,
        PiiKind::Email => DUMMY_EMAIL,
        PiiKind::Url => DUMMY_URL,
    }
}

/// Rewrites every detected identifier span in the corpus per the strategy.
/// Text outside the spans is preserved byte for byte; token bindings are
/// cleared (re-tokenize against a vocabulary afterwards).
pub fn sanitize(corpus: &Corpus, strategy: &SanitizeStrategy) -> Result<Corpus, PiiError> {
    let mut rng = match strategy {
        SanitizeStrategy::RandomPublicPii { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        _ => None,
    };
    let mut documents = Vec::with_capacity(corpus.documents.len());
    for doc in &corpus.documents {
        let spans = detect_pii(&doc.raw_text);
        let mut text = String::with_capacity(doc.raw_text.len());
        let mut cursor = 0usize;
        for span in &spans {
            text.push_str(&doc.raw_text[cursor..span.start]);
            match strategy {
                SanitizeStrategy::EndOfText => text.push_str(END_OF_TEXT),
                SanitizeStrategy::DummyPii => text.push_str(dummy_for(span.kind)),
                SanitizeStrategy::RandomPublicPii { pool, .. } => {
                    let choices = pool.for_kind(span.kind);
                    if choices.is_empty() {
                        return Err(PiiError::EmptyPool(span.kind.name()));
                    }
                    let pick = rng.as_mut().unwrap().random_range(0..choices.len());
                    text.push_str(&choices[pick]);
                }
            }
            cursor = span.end;
        }
        text.push_str(&doc.raw_text[cursor..]);
        documents.push(Document {
            id: doc.id,
            raw_text: text,
            tokens: TokenSeq::default(),
            origin: doc.origin,
        });
    }
    Ok(Corpus {
        documents,
        label: corpus.label.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Origin;
    use proptest::prelude::*;

    #[test]
    fn detects_dashed_phone() {
        let spans = detect_pii("reach me at 555-123-4567");
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].kind, PiiKind::Phone);
        assert_eq!(spans[0].surface, "555-123-4567");
        assert_eq!(&"reach me at 555-123-4567"[spans[0].start..spans[0].end], "555-123-4567");
    }

    #[test]
    fn detects_phone_variants() {
        for text in ["555.123.4567", "555 123 4567", "(555) 123-4567", "(555)123-4567"] {
            let spans = detect_pii(text);
            assert_eq!(spans.len(), 1, "{text}");
            assert_eq!(spans[0].surface, text);
        }
        // 3-3-3 digits is not a phone under this grammar.
        assert!(detect_pii("123-456-789").is_empty());
    }

    #[test]
    fn detects_url_and_email_together() {
        let spans = detect_pii("see https://x.co/a?b=1 or a@b.com");
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[0].kind, PiiKind::Url);
        assert_eq!(spans[0].surface, "https://x.co/a?b=1");
        assert_eq!(spans[1].kind, PiiKind::Email);
        assert_eq!(spans[1].surface, "a@b.com");
    }

    #[test]
    fn url_wins_overlap_with_email() {
        let spans = detect_pii("http://host.com/a@b.com");
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].kind, PiiKind::Url);
    }

    #[test]
    fn unique_pii_deduplicates_across_documents() {
        let corpus = Corpus::from_texts(
            "c",
            Origin::Private,
            vec!["mail a@b.com".to_string(), "again a@b.com".to_string()],
        );
        let sets = unique_pii(&corpus);
        assert_eq!(sets[&PiiKind::Email].len(), 1);
        assert!(sets[&PiiKind::Phone].is_empty());

        let empty = Corpus::from_texts("c", Origin::Private, Vec::<String>::new());
        let sets = unique_pii(&empty);
        assert!(sets.values().all(|s| s.is_empty()));
    }

    #[test]
    fn sanitize_end_of_text_and_dummy() {
        let corpus = Corpus::from_texts(
            "c",
            Origin::Private,
            vec!["call 555-123-4567".to_string()],
        );
        let eot = sanitize(&corpus, &SanitizeStrategy::EndOfText).unwrap();
        assert_eq!(eot.documents[0].raw_text, "call <|endoftext|>");
        let dummy = sanitize(&corpus, &SanitizeStrategy::DummyPii).unwrap();
        assert_eq!(dummy.documents[0].raw_text, "call 123-456-789");
    }

    #[test]
    fn sanitize_is_idempotent_for_fixed_strategies() {
        let corpus = Corpus::from_texts(
            "c",
            Origin::Private,
            vec![
                "call 555-123-4567 or mail a@b.com".to_string(),
                "see https://x.co/a now".to_string(),
            ],
        );
        for strategy in [SanitizeStrategy::EndOfText, SanitizeStrategy::DummyPii] {
            let once = sanitize(&corpus, &strategy).unwrap();
            let twice = sanitize(&once, &strategy).unwrap();
            assert_eq!(once, twice, "{}", strategy.name());
        }
    }

    #[test]
    fn sanitize_random_public_draws_from_pool() {
        let pool = PiiPool {
            phones: vec!["800-000-1111".to_string(), "800-000-2222".to_string()],
            emails: vec!["info@example.org".to_string()],
            urls: vec!["https://example.org".to_string()],
        };
        let corpus = Corpus::from_texts(
            "c",
            Origin::Private,
            vec!["call 555-123-4567 or 555-123-9999".to_string()],
        );
        let strategy = SanitizeStrategy::RandomPublicPii { pool, seed: 3 };
        let out = sanitize(&corpus, &strategy).unwrap();
        let text = &out.documents[0].raw_text;
        assert!(!text.contains("555-123-4567") && !text.contains("555-123-9999"));
        assert!(text.contains("800-000-"));
        // Determinism under the strategy seed.
        assert_eq!(out, sanitize(&corpus, &strategy).unwrap());

        let empty_pool = SanitizeStrategy::RandomPublicPii {
            pool: PiiPool::default(),
            seed: 3,
        };
        assert!(matches!(
            sanitize(&corpus, &empty_pool),
            Err(PiiError::EmptyPool("phone"))
        ));
    }

    #[test]
    fn sanitize_removes_all_original_surfaces() {
        let corpus = Corpus::from_texts(
            "c",
            Origin::Private,
            vec![
                "call 555-123-4567 and 555.987.6543".to_string(),
                "mail bob@corp.com or visit https://corp.com/x".to_string(),
            ],
        );
        let original = unique_pii(&corpus);
        let pool = PiiPool {
            phones: vec!["800-000-1111".to_string()],
            emails: vec!["info@example.org".to_string()],
            urls: vec!["https://example.org".to_string()],
        };
        for strategy in [
            SanitizeStrategy::EndOfText,
            SanitizeStrategy::DummyPii,
            SanitizeStrategy::RandomPublicPii { pool, seed: 9 },
        ] {
            let out = sanitize(&corpus, &strategy).unwrap();
            for doc in &out.documents {
                for surfaces in original.values() {
                    for s in surfaces {
                        assert!(!doc.raw_text.contains(s), "{}", strategy.name());
                    }
                }
            }
        }
    }

    #[test]
    fn pool_file_round_trips() {
        let pool = PiiPool {
            phones: vec!["800-111-2222".to_string()],
            emails: vec!["a@b.org".to_string(), "c@d.org".to_string()],
            urls: vec!["https://e.org".to_string()],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.txt");
        pool.save(&path).unwrap();
        assert_eq!(PiiPool::load(&path).unwrap(), pool);
    }

    proptest! {
        // Text outside detected spans is byte-identical after sanitization.
        #[test]
        fn non_span_bytes_unchanged(prefix in "[a-z ]{0,20}", suffix in "[a-z ]{0,20}") {
            let text = format!("{prefix}555-123-4567{suffix}");
            let corpus = Corpus::from_texts("c", Origin::Private, vec![text.clone()]);
            let out = sanitize(&corpus, &SanitizeStrategy::EndOfText).unwrap();
            let spans = detect_pii(&text);
            prop_assert_eq!(spans.len(), 1);
            let expect = format!("{}{}{}", &text[..spans[0].start], END_OF_TEXT, &text[spans[0].end..]);
            prop_assert_eq!(&out.documents[0].raw_text, &expect);
        }
    }
}
