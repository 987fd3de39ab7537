//! The key-value datastore: encoded contexts mapped to their ground-truth
//! next tokens, with exact nearest-neighbor search over squared L2 distance.
//!
//! Storage is struct-of-arrays (key block, value block, provenance block) and
//! the on-disk format mirrors it: magic `KNNDS1`, little-endian header
//! (dim u32, count u64), keys (count x dim f32), values (count u32),
//! provenance (count x (u32 doc, u32 pos)), trailing CRC32 of all prior
//! bytes.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::lm::{LmError, LmParams};

const MAGIC: &[u8; 6] = b"KNNDS1";

#[derive(Debug, thiserror::Error)]
pub enum DatastoreError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("subsample of {requested} exceeds source size {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("bad format: {0}")]
    BadFormat(String),
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encode(#[from] LmError),
}

/// A borrowed view of one entry.
#[derive(Debug, Clone, PartialEq)]
pub struct DatastoreEntry<'a> {
    pub key: &'a [f32],
    pub value: u32,
    pub provenance: (u32, u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    keys: Vec<f32>,
    values: Vec<u32>,
    provenance: Vec<(u32, u32)>,
    pub label: String,
}

impl Datastore {
    pub fn empty(dim: usize, label: impl Into<String>) -> Self {
        Self {
            dim,
            keys: Vec::new(),
            values: Vec::new(),
            provenance: Vec::new(),
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value(&self, i: usize) -> u32 {
        self.values[i]
    }

    pub fn provenance(&self, i: usize) -> (u32, u32) {
        self.provenance[i]
    }

    pub fn entry(&self, i: usize) -> DatastoreEntry<'_> {
        DatastoreEntry {
            key: self.key(i),
            value: self.values[i],
            provenance: self.provenance[i],
        }
    }

    pub(crate) fn push(&mut self, key: &[f32], value: u32, provenance: (u32, u32)) {
        debug_assert_eq!(key.len(), self.dim);
        self.keys.extend_from_slice(key);
        self.values.push(value);
        self.provenance.push(provenance);
    }

    /// Builds the store by running the encoder over every document: for each
    /// position i >= 1 (1-based), one entry mapping the encoding of the
    /// preceding tokens to token i. Documents are processed in id order, so a
    /// document of n tokens contributes exactly n entries.
    pub fn build(encoder: &LmParams, corpus: &Corpus) -> Result<Datastore, DatastoreError> {
        let mut docs: Vec<_> = corpus.documents.iter().collect();
        docs.sort_by_key(|d| d.id);
        let per_doc: Vec<Result<Vec<(Vec<f32>, u32, (u32, u32))>, LmError>> = docs
            .par_iter()
            .map(|doc| {
                let mut st = encoder.state(&[])?;
                let mut entries = Vec::with_capacity(doc.tokens.len());
                for (i, &tok) in doc.tokens.as_slice().iter().enumerate() {
                    if tok as usize >= encoder.vocab_size {
                        return Err(LmError::InvalidTokenId {
                            id: tok,
                            vocab: encoder.vocab_size,
                        });
                    }
                    entries.push((st.hidden_f32(), tok, (doc.id, (i + 1) as u32)));
                    encoder.state_advance(&mut st, tok);
                }
                Ok(entries)
            })
            .collect();
        let mut ds = Datastore::empty(encoder.config.hidden_dim, corpus.label.clone());
        for doc_entries in per_doc {
            for (key, value, prov) in doc_entries? {
                ds.push(&key, value, prov);
            }
        }
        Ok(ds)
    }

    /// Exact k-nearest-neighbor scan: the `min(k, len)` entries closest to
    /// `query` in squared L2 distance, ascending, ties broken by insertion
    /// order.
    pub fn knn(&self, query: &[f32], k: usize) -> Result<Vec<(usize, f64)>, DatastoreError> {
        if k == 0 {
            return Err(DatastoreError::ZeroK);
        }
        if query.len() != self.dim {
            return Err(DatastoreError::DimMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let q: Vec<f64> = query.iter().map(|&x| x as f64).collect();
        let dim = self.dim;
        let dists: Vec<f64> = self
            .keys
            .par_chunks(dim)
            .map(|key| {
                let mut d = 0.0f64;
                for (a, &b) in key.iter().zip(&q) {
                    let diff = *a as f64 - b;
                    d += diff * diff;
                }
                d
            })
            .collect();
        let mut order: Vec<usize> = (0..dists.len()).collect();
        let take = k.min(order.len());
        let cmp = |a: &usize, b: &usize| dists[*a].total_cmp(&dists[*b]).then_with(|| a.cmp(b));
        if take < order.len() {
            order.select_nth_unstable_by(take - 1, cmp);
            order.truncate(take);
        }
        order.sort_by(cmp);
        Ok(order.into_iter().map(|i| (i, dists[i])).collect())
    }

    /// Uniform entry subsamples of the two stores (seeded, order-preserving),
    /// concatenated a-then-b. `None` takes the whole store.
    pub fn compose(
        a: &Datastore,
        b: &Datastore,
        n_a: Option<usize>,
        n_b: Option<usize>,
        seed: u64,
    ) -> Result<Datastore, DatastoreError> {
        if a.dim != b.dim {
            return Err(DatastoreError::DimMismatch {
                expected: a.dim,
                got: b.dim,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |ds: &Datastore, n: Option<usize>| -> Result<Vec<usize>, DatastoreError> {
            let n = n.unwrap_or(ds.len());
            if n > ds.len() {
                return Err(DatastoreError::SampleTooLarge {
                    requested: n,
                    available: ds.len(),
                });
            }
            let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, ds.len(), n).into_vec();
            idx.sort_unstable();
            Ok(idx)
        };
        let ia = pick(a, n_a)?;
        let ib = pick(b, n_b)?;
        let mut out = Datastore::empty(a.dim, format!("{}+{}", a.label, b.label));
        for i in ia {
            let e = a.entry(i);
            out.push(e.key, e.value, e.provenance);
        }
        for i in ib {
            let e = b.entry(i);
            out.push(e.key, e.value, e.provenance);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatastoreError> {
        let mut buf = Vec::with_capacity(18 + self.keys.len() * 4 + self.values.len() * 12);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for k in &self.keys {
            buf.extend_from_slice(&k.to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for (doc, pos) in &self.provenance {
            buf.extend_from_slice(&doc.to_le_bytes());
            buf.extend_from_slice(&pos.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        fs::write(path, buf)?;
        Ok(())
    }

    /// Loads a datastore; the label is taken from the file stem.
    pub fn load(path: &Path) -> Result<Datastore, DatastoreError> {
        let data = fs::read(path)?;
        if data.len() < MAGIC.len() + 4 + 8 + 4 {
            return Err(DatastoreError::BadFormat("file too short".into()));
        }
        if &data[..6] != MAGIC {
            return Err(DatastoreError::BadFormat("bad magic".into()));
        }
        let body = &data[..data.len() - 4];
        let stored_crc = u32::from_le_bytes(data[data.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != stored_crc {
            return Err(DatastoreError::ChecksumMismatch);
        }
        let dim = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(body[10..18].try_into().unwrap()) as usize;
        let expected = 18 + count * dim * 4 + count * 4 + count * 8;
        if body.len() != expected {
            return Err(DatastoreError::BadFormat(format!(
                "length {} does not match header (expected {})",
                body.len(),
                expected
            )));
        }
        let mut off = 18usize;
        let mut keys = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            keys.push(f32::from_le_bytes(body[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(u32::from_le_bytes(body[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        let mut provenance = Vec::with_capacity(count);
        for _ in 0..count {
            let doc = u32::from_le_bytes(body[off..off + 4].try_into().unwrap());
            let pos = u32::from_le_bytes(body[off + 4..off + 8].try_into().unwrap());
            provenance.push((doc, pos));
            off += 8;
        }
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Datastore {
            dim,
            keys,
            values,
            provenance,
            label,
        })
    }
}
