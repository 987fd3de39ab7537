//! velum: a desk-scale laboratory for studying data-extraction privacy risks
//! in retrieval-augmented (kNN) language models.
//!
//! The crate covers the full loop: tokenization and synthetic corpora with
//! planted personal identifiers, a small trainable recurrent LM that doubles
//! as the context encoder, an exact nearest-neighbor datastore, interpolated
//! kNN-LM inference, a two-endpoint HTTP deployment surface, targeted and
//! untargeted extraction attacks run through that surface, the sanitization
//! and encoder-decoupling mitigations, and a scenario runner that measures
//! the privacy/utility trade-offs end to end.

pub mod attack;
pub mod corpus;
pub mod datastore;
pub mod experiments;
pub mod knnlm;
pub mod lm;
pub mod pii;
pub mod service;
