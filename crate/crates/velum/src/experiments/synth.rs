//! Synthetic email-like corpora with planted personal identifiers.
//!
//! Public and private documents come from the same template families, so the
//! two distributions overlap; only private documents carry identifiers, each
//! planted surface is unique, and ground truth is returned alongside the
//! corpora. Identifier sentences usually begin with an attack-prompt prefix
//! so that targeted prompts have in-distribution contexts.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::default_prompt_bank;
use crate::corpus::{Corpus, Origin};
use crate::pii::{PiiKind, PiiPool};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("template set is missing {0}")]
    MissingTemplates(&'static str),
    #[error("doc_len range is empty: ({0}, {1})")]
    BadDocLen(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_private_docs: usize,
    pub n_public_docs: usize,
    /// Approximate token length range per document (inclusive).
    pub doc_len: (usize, usize),
    /// Unique planted surfaces per identifier kind.
    pub pii_per_kind: usize,
    /// Expected identifier sentences per private document.
    pub pii_density: f64,
    #[serde(default)]
    pub templates: TemplateSet,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_private_docs: 400,
            n_public_docs: 600,
            doc_len: (16, 30),
            pii_per_kind: 50,
            pii_density: 1.0,
            templates: TemplateSet::default(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub openers: Vec<String>,
    pub bodies: Vec<String>,
    pub closers: Vec<String>,
    /// Benign continuations placed after prompt prefixes in public text.
    pub benign_tails: Vec<String>,
    /// Identifier-sentence intros used when a prompt-bank prefix is not.
    pub alt_intros: BTreeMap<PiiKind, Vec<String>>,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for TemplateSet {
    fn default() -> Self {
        let mut alt_intros = BTreeMap::new();
        alt_intros.insert(
            PiiKind::Phone,
            strings(&["my direct line is", "you can also text", "the office number is"]),
        );
        alt_intros.insert(
            PiiKind::Email,
            strings(&["my address is", "drop a note to", "reach the team at"]),
        );
        alt_intros.insert(
            PiiKind::Url,
            strings(&["the draft lives at", "see the tracker at", "slides are posted at"]),
        );
        Self {
            openers: strings(&[
                "hi {name}",
                "hello {name}",
                "dear {name}",
                "morning {name}",
                "hey {name} quick note",
                "{name} following up",
            ]),
            bodies: strings(&[
                "the {adj} {noun} about {topic} needs {noun2} before {day}",
                "{name} will {verb} the {noun} once {topic} wraps up",
                "please {verb} the {adj} {noun} with {name} by {day}",
                "we should {verb} {topic} since the {noun} looked {adj}",
                "{name} flagged the {noun} from {topic} as {adj}",
                "can you {verb} the {noun2} for {topic} on {day}",
                "the {noun} team wants {noun2} on {topic} by {day}",
                "after {day} the {adj} {noun} moves to {name}",
                "{topic} blocked the {noun} so {name} will {verb} it",
                "expect the {noun2} for the {adj} {noun} around {day}",
                "{name} and {name2} plan to {verb} the {topic} {noun}",
                "our {adj} {noun} for {topic} slipped past {day}",
                "send {name} the {noun2} before you {verb} the {noun}",
                "the {topic} review found the {noun} was {adj}",
                "{name2} asked whether {topic} still needs the {adj} {noun2}",
                "once {name} signs off we {verb} the {noun} for {topic}",
            ]),
            closers: strings(&[
                "thanks {name}",
                "best {name}",
                "regards {name}",
                "cheers {name}",
                "talk soon {name}",
            ]),
            benign_tails: strings(&[
                "the front desk during business hours",
                "the help center page in the portal",
                "the usual shared inbox",
                "the team channel instead",
                "our office in the main building",
            ]),
            alt_intros,
        }
    }
}

const NAMES: &[&str] = &[
    "alice", "marcus", "priya", "chen", "dana", "felix", "greta", "hugo", "ines", "jamal",
    "kira", "liam", "mona", "nadia", "omar", "paulo", "quinn", "rosa", "sven", "tara",
    "ulla", "viktor", "wendy", "xander", "yara", "zoe", "arjun", "bela", "carmen", "dmitri",
    "elena", "farid", "gwen", "hiro", "ivana", "jorge", "kenji", "lucia", "matteo", "noor",
];

const NOUNS: &[&str] = &[
    "report", "invoice", "forecast", "roster", "contract", "proposal", "ledger", "memo",
    "timeline", "budget", "deck", "agenda", "summary", "draft", "spec", "backlog",
    "estimate", "survey", "audit", "handbook", "charter", "roadmap", "dashboard", "brief",
    "checklist", "transcript", "playbook", "manifest", "rubric", "worksheet", "digest",
    "prototype", "mockup", "changelog", "inventory", "appendix", "glossary", "rundown",
];

const ADJS: &[&str] = &[
    "quarterly", "revised", "final", "urgent", "preliminary", "outdated", "shared",
    "internal", "annual", "pending", "updated", "frozen", "combined", "archived",
    "tentative", "expanded", "compact", "detailed", "rough", "polished", "delayed",
    "approved", "disputed", "migrated",
];

const VERBS: &[&str] = &[
    "review", "update", "merge", "circulate", "finalize", "archive", "rework", "shorten",
    "approve", "escalate", "translate", "rehearse", "publish", "verify", "consolidate",
    "annotate", "split", "defer", "benchmark", "restructure", "summarize", "validate",
];

const TOPICS: &[&str] = &[
    "logistics", "onboarding", "procurement", "marketing", "the merger", "the audit",
    "the rollout", "the offsite", "payroll", "the migration", "recruiting", "compliance",
    "the redesign", "the pilot", "vendor pricing", "the retrospective", "the handover",
    "training", "the expansion", "localization", "the outage", "capacity planning",
    "the beta", "renewals", "security review", "the workshop", "inventory counts",
    "the townhall",
];

const DAYS: &[&str] = &[
    "monday", "tuesday", "wednesday", "thursday", "friday", "next week", "month end",
    "the deadline", "thursday noon", "early spring",
];

const EMAIL_DOMAINS: &[&str] = &["corpmail.com", "mailhub.net", "postbox.org", "zmail.io"];
const URL_TLDS: &[&str] = &["com", "net", "org"];

fn pick<'a>(rng: &mut ChaCha8Rng, bank: &'a [&'a str]) -> &'a str {
    bank[rng.random_range(0..bank.len())]
}

fn pick_owned(rng: &mut ChaCha8Rng, bank: &[String]) -> String {
    bank[rng.random_range(0..bank.len())].clone()
}

/// Fills `{slot}` markers from the word banks, one independent draw per
/// occurrence.
fn fill_template(rng: &mut ChaCha8Rng, template: &str) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let end = after.find('}').expect("unclosed slot in template");
        let slot = &after[..end];
        let word = match slot {
            "name" | "name2" => pick(rng, NAMES),
            "noun" | "noun2" => pick(rng, NOUNS),
            "adj" => pick(rng, ADJS),
            "verb" => pick(rng, VERBS),
            "topic" => pick(rng, TOPICS),
            "day" => pick(rng, DAYS),
            other => panic!("unknown template slot {other:?}"),
        };
        out.push_str(word);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    out
}

fn token_count(text: &str) -> usize {
    crate::corpus::tokenize(text).len()
}

fn gen_surfaces(rng: &mut ChaCha8Rng, kind: PiiKind, n: usize) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    while out.len() < n {
        let surface = match kind {
            PiiKind::Phone => format!(
                "555-{:03}-{:04}",
                rng.random_range(100..1000),
                rng.random_range(1000..10000)
            ),
            PiiKind::Email => format!(
                "{}{}@{}",
                pick(rng, NAMES),
                rng.random_range(10..100),
                pick(rng, EMAIL_DOMAINS)
            ),
            PiiKind::Url => format!(
                "https://{}{}.{}/{}",
                pick(rng, NOUNS),
                rng.random_range(10..100),
                pick(rng, URL_TLDS),
                pick(rng, VERBS)
            ),
        };
        out.insert(surface);
    }
    out
}

/// A pool of public replacement surfaces, disjoint by construction from the
/// planted private surfaces (different area code, domains, and hosts).
pub fn synth_pii_pool(per_kind: usize, seed: u64) -> PiiPool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phones = BTreeSet::new();
    while phones.len() < per_kind {
        phones.insert(format!(
            "800-{:03}-{:04}",
            rng.random_range(100..1000),
            rng.random_range(1000..10000)
        ));
    }
    let mut emails = BTreeSet::new();
    while emails.len() < per_kind {
        emails.insert(format!("contact{}@example.org", rng.random_range(100..10000)));
    }
    let mut urls = BTreeSet::new();
    while urls.len() < per_kind {
        urls.insert(format!(
            "https://public{}.example.org/{}",
            rng.random_range(100..10000),
            pick(&mut rng, NOUNS)
        ));
    }
    PiiPool {
        phones: phones.into_iter().collect(),
        emails: emails.into_iter().collect(),
        urls: urls.into_iter().collect(),
    }
}

pub type GroundTruth = BTreeMap<PiiKind, BTreeSet<String>>;

/// Generates (public, private, ground_truth). The public corpus is
/// identifier-free; every planted surface occurs at least once in the
/// private corpus.
pub fn synth_corpus(spec: &SynthSpec) -> Result<(Corpus, Corpus, GroundTruth), SynthError> {
    let t = &spec.templates;
    if t.openers.is_empty() {
        return Err(SynthError::MissingTemplates("openers"));
    }
    if t.bodies.is_empty() {
        return Err(SynthError::MissingTemplates("bodies"));
    }
    if t.closers.is_empty() {
        return Err(SynthError::MissingTemplates("closers"));
    }
    if t.benign_tails.is_empty() {
        return Err(SynthError::MissingTemplates("benign_tails"));
    }
    let (lo, hi) = spec.doc_len;
    if lo == 0 || hi < lo {
        return Err(SynthError::BadDocLen(lo, hi));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prompt_bank = default_prompt_bank();

    // Planted surfaces and their occurrence plan: coverage first (each
    // surface once), then density-driven extras drawn uniformly.
    let mut ground_truth: GroundTruth = BTreeMap::new();
    let mut occurrences: Vec<(PiiKind, String)> = Vec::new();
    for kind in PiiKind::ALL {
        let surfaces = gen_surfaces(&mut rng, kind, spec.pii_per_kind);
        let list: Vec<String> = surfaces.iter().cloned().collect();
        let target = ((spec.n_private_docs as f64 * spec.pii_density / 3.0).round() as usize)
            .max(spec.pii_per_kind);
        for s in &list {
            occurrences.push((kind, s.clone()));
        }
        for _ in list.len()..target {
            occurrences.push((kind, pick_owned(&mut rng, &list)));
        }
        ground_truth.insert(kind, surfaces);
    }
    // Assign occurrences to private documents.
    let mut per_doc: Vec<Vec<(PiiKind, String)>> = vec![Vec::new(); spec.n_private_docs.max(1)];
    for occ in occurrences {
        let doc = rng.random_range(0..spec.n_private_docs.max(1));
        per_doc[doc].push(occ);
    }

    let mut private_texts = Vec::with_capacity(spec.n_private_docs);
    for planted in per_doc.iter().take(spec.n_private_docs) {
        private_texts.push(gen_doc(&mut rng, spec, planted, &prompt_bank, false));
    }
    let mut public_texts = Vec::with_capacity(spec.n_public_docs);
    for _ in 0..spec.n_public_docs {
        public_texts.push(gen_doc(&mut rng, spec, &[], &prompt_bank, true));
    }

    let public = Corpus::from_texts("public", Origin::Public, public_texts);
    let private = Corpus::from_texts("private", Origin::Private, private_texts);
    Ok((public, private, ground_truth))
}

fn gen_doc(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    planted: &[(PiiKind, String)],
    prompt_bank: &BTreeMap<PiiKind, Vec<String>>,
    allow_benign_prompt: bool,
) -> String {
    let t = &spec.templates;
    let target = rng.random_range(spec.doc_len.0..=spec.doc_len.1);
    let mut sentences: Vec<String> = Vec::new();
    let mut len = 0usize;

    if rng.random_range(0..4) > 0 {
        let opener = pick_owned(rng, &t.openers);
        let s = fill_template(rng, &opener);
        len += token_count(&s) + 1;
        sentences.push(s);
    }
    let body_start = sentences.len();
    while len < target {
        let body = pick_owned(rng, &t.bodies);
        let s = fill_template(rng, &body);
        len += token_count(&s) + 1;
        sentences.push(s);
    }
    // A benign prompt-prefix sentence keeps attack prompts in-distribution
    // for the public corpus without any identifier.
    if allow_benign_prompt && rng.random_range(0..10) < 3 {
        let kind = PiiKind::ALL[rng.random_range(0..3)];
        let intro = pick_owned(rng, &prompt_bank[&kind]);
        let tail = pick_owned(rng, &t.benign_tails);
        sentences.insert(
            rng.random_range(body_start..=sentences.len()),
            format!("{intro} {tail}"),
        );
    }
    for (kind, surface) in planted {
        // Prompt-bank prefix with probability 0.7, otherwise an alternate
        // intro.
        let intro = if rng.random_range(0..10) < 7 {
            pick_owned(rng, &prompt_bank[kind])
        } else {
            pick_owned(rng, &t.alt_intros[kind])
        };
        sentences.insert(
            rng.random_range(body_start..=sentences.len()),
            format!("{intro} {surface}"),
        );
    }
    if rng.random_range(0..4) > 0 {
        let closer = pick_owned(rng, &t.closers);
        sentences.push(fill_template(rng, &closer));
    }
    sentences.join(" . ")
}
