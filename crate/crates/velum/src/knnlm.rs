//! Retrieval-augmented inference: a softmax over negative neighbor distances
//! interpolated with the base model's next-token distribution.
//!
//! The query encoder and the base model default to the same parameters but
//! can be decoupled, and the key encoder used to build the datastore can
//! differ from both; that separation is the control surface for the privacy
//! experiments.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, Vocabulary, EOS_ID};
use crate::datastore::{Datastore, DatastoreError};
use crate::lm::{decode, log_sum_exp, GenConfig, LmError, LmParams, LmState, TokenScorer};

#[derive(Debug, thiserror::Error)]
pub enum KnnLmError {
    #[error("lambda must be in [0, 1], got {0}")]
    LambdaOutOfRange(f64),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no retrieval support: datastore is empty")]
    NoRetrievalSupport,
    #[error("query encoder hidden dim {encoder} does not match datastore dim {datastore}")]
    DimMismatch { encoder: usize, datastore: usize },
    #[error("model parts disagree on the vocabulary")]
    VocabMismatch,
    #[error("distribution lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("bad bundle: {0}")]
    BadBundle(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Datastore(#[from] DatastoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bundle config: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnLmConfig {
    pub k: usize,
    pub lambda: f64,
    pub temperature: f64,
}

impl KnnLmConfig {
    pub fn new(k: usize, lambda: f64) -> Result<Self, KnnLmError> {
        Self::with_temperature(k, lambda, 1.0)
    }

    pub fn with_temperature(k: usize, lambda: f64, temperature: f64) -> Result<Self, KnnLmError> {
        if k == 0 {
            return Err(KnnLmError::ZeroK);
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(KnnLmError::LambdaOutOfRange(lambda));
        }
        if !(temperature > 0.0) {
            return Err(KnnLmError::BadTemperature(temperature));
        }
        Ok(Self {
            k,
            lambda,
            temperature,
        })
    }
}

/// Elementwise convex combination `lambda * p_knn + (1 - lambda) * p_lm`.
pub fn interpolate(p_lm: &[f64], p_knn: &[f64], lambda: f64) -> Result<Vec<f64>, KnnLmError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(KnnLmError::LambdaOutOfRange(lambda));
    }
    if p_lm.len() != p_knn.len() {
        return Err(KnnLmError::LengthMismatch(p_lm.len(), p_knn.len()));
    }
    Ok(p_lm
        .iter()
        .zip(p_knn)
        .map(|(&lm, &knn)| lambda * knn + (1.0 - lambda) * lm)
        .collect())
}

/// A next-token distribution plus whether retrieval contributed to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDist {
    pub probs: Vec<f64>,
    pub retrieval: bool,
}

/// A deployable model: base LM (provides the parametric distribution), query
/// encoder, datastore, and (k, lambda, temperature).
#[derive(Debug, Clone)]
pub struct KnnLm {
    pub base_lm: Arc<LmParams>,
    pub query_encoder: Arc<LmParams>,
    pub datastore: Arc<Datastore>,
    pub config: KnnLmConfig,
}

impl KnnLm {
    /// Standard binding: one parameter set provides both the parametric
    /// distribution and the query encoding.
    pub fn new(
        model: Arc<LmParams>,
        datastore: Arc<Datastore>,
        config: KnnLmConfig,
    ) -> Result<Self, KnnLmError> {
        Self::with_query_encoder(model.clone(), model, datastore, config)
    }

    pub fn with_query_encoder(
        base_lm: Arc<LmParams>,
        query_encoder: Arc<LmParams>,
        datastore: Arc<Datastore>,
        config: KnnLmConfig,
    ) -> Result<Self, KnnLmError> {
        if query_encoder.config.hidden_dim != datastore.dim() {
            return Err(KnnLmError::DimMismatch {
                encoder: query_encoder.config.hidden_dim,
                datastore: datastore.dim(),
            });
        }
        if base_lm.vocab_size != query_encoder.vocab_size {
            return Err(KnnLmError::VocabMismatch);
        }
        // Re-validate ranges in case the config was deserialized.
        KnnLmConfig::with_temperature(config.k, config.lambda, config.temperature)?;
        Ok(Self {
            base_lm,
            query_encoder,
            datastore,
            config,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.base_lm.vocab_size
    }

    /// Retrieval distribution for an already-encoded query: a softmax over
    /// negative squared distances, aggregated per retrieved value token and
    /// normalized over the retrieved mass. Tokens with no retrieved support
    /// have probability zero.
    pub fn p_knn_from_query(&self, query: &[f32]) -> Result<Vec<f64>, KnnLmError> {
        if self.datastore.is_empty() {
            return Err(KnnLmError::NoRetrievalSupport);
        }
        let hits = self.datastore.knn(query, self.config.k)?;
        let mut weights: HashMap<u32, Vec<f64>> = HashMap::new();
        let mut all = Vec::with_capacity(hits.len());
        for (idx, dist) in hits {
            let w = -dist / self.config.temperature;
            weights.entry(self.datastore.value(idx)).or_default().push(w);
            all.push(w);
        }
        let total = log_sum_exp(&all);
        let mut probs = vec![0.0f64; self.vocab_size()];
        for (token, ws) in weights {
            probs[token as usize] = (log_sum_exp(&ws) - total).exp();
        }
        Ok(probs)
    }

    /// Retrieval distribution for a token context.
    pub fn p_knn(&self, context: &TokenSeq) -> Result<Vec<f64>, KnnLmError> {
        let query = self.query_encoder.encode(context)?;
        self.p_knn_from_query(&query)
    }

    fn dist_from_state(&self, st: &KnnState) -> ModelDist {
        let p_lm = self.base_lm.state_probs(&st.base);
        if self.datastore.is_empty() {
            return ModelDist {
                probs: p_lm,
                retrieval: false,
            };
        }
        let p_knn = self
            .p_knn_from_query(&st.query.hidden_f32())
            .expect("dimensions validated at construction");
        let probs = interpolate(&p_lm, &p_knn, self.config.lambda)
            .expect("lambda validated at construction");
        ModelDist {
            probs,
            retrieval: true,
        }
    }

    /// Interpolated next-token distribution. Falls back to the pure
    /// parametric distribution (flagged) when the datastore is empty.
    pub fn model_next_dist(&self, context: &TokenSeq) -> Result<ModelDist, KnnLmError> {
        let st = self.session(context.as_slice())?;
        Ok(self.dist_from_state(&st))
    }

    fn session(&self, context: &[u32]) -> Result<KnnState, KnnLmError> {
        Ok(KnnState {
            base: self.base_lm.state(context)?,
            query: self.query_encoder.state(context)?,
        })
    }

    /// Sequence perplexity under the interpolated model.
    pub fn model_perplexity(&self, seq: &TokenSeq) -> Result<f64, KnnLmError> {
        if seq.is_empty() {
            return Err(KnnLmError::Lm(LmError::EmptySequence));
        }
        let mut st = self.session(&[])?;
        let mut nll = 0.0f64;
        for &y in seq.as_slice() {
            if y as usize >= self.vocab_size() {
                return Err(KnnLmError::Lm(LmError::InvalidTokenId {
                    id: y,
                    vocab: self.vocab_size(),
                }));
            }
            let dist = self.dist_from_state(&st);
            nll -= crate::lm::floor_prob(dist.probs[y as usize]).ln();
            self.push(&mut st, y);
        }
        Ok((nll / seq.len() as f64).exp())
    }

    /// Decodes a continuation scored by the interpolated model.
    pub fn model_generate(
        &self,
        prompt: &TokenSeq,
        gen: &GenConfig,
    ) -> Result<TokenSeq, KnnLmError> {
        let st = self.session(prompt.as_slice())?;
        Ok(TokenSeq::new(decode(self, st, gen, EOS_ID)?))
    }
}

#[derive(Clone)]
pub(crate) struct KnnState {
    base: LmState,
    query: LmState,
}

impl TokenScorer for KnnLm {
    type State = KnnState;

    fn vocab(&self) -> usize {
        self.vocab_size()
    }

    fn dist(&self, st: &KnnState) -> Vec<f64> {
        self.dist_from_state(st).probs
    }

    fn push(&self, st: &mut KnnState, token: u32) {
        self.base_lm.state_advance(&mut st.base, token);
        self.query_encoder.state_advance(&mut st.query, token);
    }
}

/// A loaded model bundle: the deployable model plus its vocabulary.
pub struct Bundle {
    pub model: KnnLm,
    pub vocab: Arc<Vocabulary>,
}

const BASE_FILE: &str = "base.lm";
const QUERY_FILE: &str = "query.lm";
const DATASTORE_FILE: &str = "datastore.knnds";
const CONFIG_FILE: &str = "config.json";

/// Writes a model bundle directory: base and query checkpoints, datastore,
/// and the (k, lambda, temperature) config.
pub fn save_bundle(
    dir: &Path,
    model: &KnnLm,
    vocab: &Vocabulary,
) -> Result<(), KnnLmError> {
    fs::create_dir_all(dir)?;
    model.base_lm.save(&dir.join(BASE_FILE), vocab)?;
    model.query_encoder.save(&dir.join(QUERY_FILE), vocab)?;
    model.datastore.save(&dir.join(DATASTORE_FILE))?;
    fs::write(
        dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(&model.config)?,
    )?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<Bundle, KnnLmError> {
    let (base, base_vocab) = LmParams::load(&dir.join(BASE_FILE))?;
    let (query, query_vocab) = LmParams::load(&dir.join(QUERY_FILE))?;
    if base_vocab != query_vocab {
        return Err(KnnLmError::VocabMismatch);
    }
    let datastore = Datastore::load(&dir.join(DATASTORE_FILE))?;
    let config: KnnLmConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    if datastore.len() > 0 {
        let vocab_len = base_vocab.len();
        for i in 0..datastore.len() {
            if datastore.value(i) as usize >= vocab_len {
                return Err(KnnLmError::BadBundle(format!(
                    "datastore value {} outside vocabulary",
                    datastore.value(i)
                )));
            }
        }
    }
    let model = KnnLm::with_query_encoder(
        Arc::new(base),
        Arc::new(query),
        Arc::new(datastore),
        config,
    )?;
    Ok(Bundle {
        model,
        vocab: Arc::new(query_vocab),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Corpus, Origin};
    use crate::lm::LmConfig;
    use proptest::prelude::*;

    fn vocab12() -> Vocabulary {
        let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
        let corpus = Corpus::from_texts("t", Origin::Synthetic, vec![words.join(" ")]);
        build_vocab(&corpus, 16).unwrap()
    }

    fn params(seed: u64, hidden: usize) -> Arc<LmParams> {
        Arc::new(LmParams::init(
            LmConfig {
                embed_dim: 8,
                hidden_dim: hidden,
                context_window: 8,
                seed,
            },
            &vocab12(),
        ))
    }

    /// One-dimensional store with hand-set keys; distances to the zero query
    /// are key^2.
    fn hand_store(entries: &[(f32, u32)]) -> Arc<Datastore> {
        let mut ds = Datastore::empty(1, "hand");
        for (i, &(key, value)) in entries.iter().enumerate() {
            ds.push(&[key], value, (i as u32, 1));
        }
        Arc::new(ds)
    }

    fn one_dim_model(ds: Arc<Datastore>, k: usize, lambda: f64) -> KnnLm {
        let p = Arc::new(LmParams::zeros(
            LmConfig {
                embed_dim: 1,
                hidden_dim: 1,
                context_window: 8,
                seed: 0,
            },
            16,
        ));
        KnnLm::with_query_encoder(p.clone(), p, ds, KnnLmConfig::new(k, lambda).unwrap()).unwrap()
    }

    #[test]
    fn p_knn_all_neighbors_same_value() {
        let ds = hand_store(&[(0.5, 7), (0.6, 7), (0.7, 7)]);
        let model = one_dim_model(ds, 3, 0.5);
        let p = model.p_knn_from_query(&[0.0]).unwrap();
        assert!((p[7] - 1.0).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn p_knn_equal_distances_split_evenly() {
        let ds = hand_store(&[(1.0, 4), (-1.0, 5)]);
        let model = one_dim_model(ds, 2, 0.5);
        let p = model.p_knn_from_query(&[0.0]).unwrap();
        assert!((p[4] - 0.5).abs() < 1e-12);
        assert!((p[5] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn p_knn_matches_softmax_oracle() {
        // Five neighbors with known squared distances to the zero query.
        let keys = [0.5f32, 0.8, 1.0, 1.2, 1.5];
        let values = [4u32, 5, 4, 6, 7];
        let entries: Vec<(f32, u32)> = keys.iter().copied().zip(values).collect();
        let ds = hand_store(&entries);
        let model = one_dim_model(ds, 5, 0.5);
        let p = model.p_knn_from_query(&[0.0]).unwrap();

        // Oracle: direct exponential aggregation at t = 1.
        let w: Vec<f64> = keys.iter().map(|&k| (-((k as f64) * (k as f64))).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut expect = vec![0.0f64; 16];
        for (i, &v) in values.iter().enumerate() {
            expect[v as usize] += w[i] / total;
        }
        for (a, b) in p.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn p_knn_requires_retrieval_support() {
        let model = one_dim_model(Arc::new(Datastore::empty(1, "e")), 2, 0.5);
        assert!(matches!(
            model.p_knn_from_query(&[0.0]),
            Err(KnnLmError::NoRetrievalSupport)
        ));
    }

    #[test]
    fn k_clamps_to_store_size() {
        let ds = hand_store(&[(0.5, 4), (1.0, 5)]);
        let small = one_dim_model(ds.clone(), 2, 0.5);
        let large = one_dim_model(ds, 64, 0.5);
        assert_eq!(
            small.p_knn_from_query(&[0.0]).unwrap(),
            large.p_knn_from_query(&[0.0]).unwrap()
        );
    }

    #[test]
    fn interpolate_endpoints_are_exact() {
        let p_lm = vec![0.25, 0.25, 0.5];
        let p_knn = vec![0.0, 1.0, 0.0];
        assert_eq!(interpolate(&p_lm, &p_knn, 0.0).unwrap(), p_lm);
        assert_eq!(interpolate(&p_lm, &p_knn, 1.0).unwrap(), p_knn);
        let mixed = interpolate(&p_lm, &p_knn, 0.3).unwrap();
        let expect: Vec<f64> = p_lm
            .iter()
            .zip(&p_knn)
            .map(|(l, k)| 0.3 * k + 0.7 * l)
            .collect();
        assert_eq!(mixed, expect);
        assert!(matches!(
            interpolate(&p_lm, &p_knn, 1.5),
            Err(KnnLmError::LambdaOutOfRange(_))
        ));
        assert!(matches!(
            interpolate(&p_lm, &[0.5, 0.5], 0.5),
            Err(KnnLmError::LengthMismatch(3, 2))
        ));
    }

    fn built_model(lambda: f64, k: usize) -> (KnnLm, Corpus, Vocabulary) {
        let vocab = vocab12();
        let corpus = Corpus::from_texts(
            "c",
            Origin::Private,
            vec!["w0 w1 w2 w3".to_string(), "w1 w2 w3 w4".to_string()],
        )
        .with_tokens(&vocab);
        let p = params(31, 8);
        let ds = Arc::new(Datastore::build(&p, &corpus).unwrap());
        let model = KnnLm::new(p, ds, KnnLmConfig::new(k, lambda).unwrap()).unwrap();
        (model, corpus, vocab)
    }

    #[test]
    fn lambda_zero_reduces_to_base_lm_exactly() {
        let (model, _, _) = built_model(0.0, 4);
        for ctx in [vec![], vec![4], vec![5, 6, 7]] {
            let seq = TokenSeq::new(ctx);
            let lm = model.base_lm.next_dist(&seq).unwrap();
            let full = model.model_next_dist(&seq).unwrap();
            assert!(full.retrieval);
            assert_eq!(full.probs, lm);
        }
    }

    #[test]
    fn pipeline_equals_composed_operations() {
        let (model, _, _) = built_model(0.35, 3);
        let ctx = TokenSeq::new(vec![4, 5]);
        let composed = interpolate(
            &model.base_lm.next_dist(&ctx).unwrap(),
            &model.p_knn(&ctx).unwrap(),
            model.config.lambda,
        )
        .unwrap();
        assert_eq!(model.model_next_dist(&ctx).unwrap().probs, composed);
    }

    #[test]
    fn single_entry_store_dominates_at_lambda_one() {
        let vocab = vocab12();
        let p = params(77, 8);
        let ctx = TokenSeq::new(vec![4, 6]);
        let key = p.encode(&ctx).unwrap();
        let corpus = Corpus::from_texts("one", Origin::Private, vec!["w0 w2 w5".to_string()])
            .with_tokens(&vocab);
        // Build a store whose only nearby key is exactly Enc_Q(ctx).
        let ds = Datastore::build(&p, &corpus).unwrap();
        // The built store has several entries; compose filters down to one.
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for i in 0..ds.len() {
            let d: f64 = ds
                .key(i)
                .iter()
                .zip(&key)
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        let winner = ds.value(best);
        let model = KnnLm::new(p, Arc::new(ds), KnnLmConfig::new(1, 1.0).unwrap()).unwrap();
        let dist = model.model_next_dist(&ctx).unwrap();
        let argmax = dist
            .probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax as u32, winner);
    }

    #[test]
    fn empty_datastore_falls_back_to_base() {
        let p = params(9, 8);
        let model = KnnLm::new(
            p.clone(),
            Arc::new(Datastore::empty(8, "none")),
            KnnLmConfig::new(4, 0.5).unwrap(),
        )
        .unwrap();
        let ctx = TokenSeq::new(vec![4]);
        let out = model.model_next_dist(&ctx).unwrap();
        assert!(!out.retrieval);
        assert_eq!(out.probs, p.next_dist(&ctx).unwrap());
        let seq = TokenSeq::new(vec![4, 5]);
        assert_eq!(
            model.model_perplexity(&seq).unwrap(),
            p.sequence_perplexity(&seq).unwrap()
        );
    }

    #[test]
    fn model_perplexity_matches_base_at_lambda_zero() {
        let (model, corpus, _) = built_model(0.0, 4);
        for doc in &corpus.documents {
            let full = model.model_perplexity(&doc.tokens).unwrap();
            let base = model.base_lm.sequence_perplexity(&doc.tokens).unwrap();
            assert_eq!(full, base);
        }
    }

    #[test]
    fn model_perplexity_single_token_consistency() {
        let (model, _, _) = built_model(0.4, 3);
        let dist = model.model_next_dist(&TokenSeq::new(vec![])).unwrap();
        let ppl = model.model_perplexity(&TokenSeq::new(vec![5])).unwrap();
        assert!((ppl - (-(dist.probs[5].ln())).exp()).abs() < 1e-12);
    }

    #[test]
    fn retrieval_lowers_perplexity_on_stored_text() {
        let (with_retrieval, corpus, _) = built_model(0.5, 4);
        let (without, _, _) = built_model(0.0, 4);
        let seq = &corpus.documents[0].tokens;
        let a = with_retrieval.model_perplexity(seq).unwrap();
        let b = without.model_perplexity(seq).unwrap();
        assert!(a < b, "retrieval {a} vs base {b}");
    }

    #[test]
    fn model_generate_matches_base_at_lambda_zero() {
        let (model, _, _) = built_model(0.0, 4);
        let prompt = TokenSeq::new(vec![4]);
        let gen = GenConfig::beam(3, 8);
        assert_eq!(
            model.model_generate(&prompt, &gen).unwrap(),
            model.base_lm.generate(&prompt, &gen).unwrap()
        );
        let gen = GenConfig::sample(0.9, 5, 8);
        assert_eq!(
            model.model_generate(&prompt, &gen).unwrap(),
            model.base_lm.generate(&prompt, &gen).unwrap()
        );
    }

    #[test]
    fn bundle_round_trips() {
        let (model, _, vocab) = built_model(0.3, 4);
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &model, &vocab).unwrap();
        let bundle = load_bundle(dir.path()).unwrap();
        assert_eq!(*bundle.vocab, vocab);
        assert_eq!(bundle.model.config, model.config);
        assert_eq!(*bundle.model.base_lm, *model.base_lm);
        assert_eq!(*bundle.model.query_encoder, *model.query_encoder);
        let ctx = TokenSeq::new(vec![4, 5]);
        assert_eq!(
            bundle.model.model_next_dist(&ctx).unwrap(),
            model.model_next_dist(&ctx).unwrap()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn model_dist_sums_to_one(
            seed in 0u64..200,
            lambda in 0.0f64..=1.0,
            ctx in proptest::collection::vec(4u32..16, 0..8),
        ) {
            let (model, _, _) = built_model(lambda, 3);
            let _ = seed;
            let dist = model.model_next_dist(&TokenSeq::new(ctx)).unwrap();
            let sum: f64 = dist.probs.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }

        #[test]
        fn retrieval_support_is_monotone(ctx in proptest::collection::vec(4u32..16, 0..8)) {
            let (model, _, _) = built_model(1.0, 4);
            let seq = TokenSeq::new(ctx);
            let p = model.p_knn(&seq).unwrap();
            let query = model.query_encoder.encode(&seq).unwrap();
            let hits = model.datastore.knn(&query, model.config.k).unwrap();
            let supported: std::collections::HashSet<u32> =
                hits.iter().map(|&(i, _)| model.datastore.value(i)).collect();
            for (tok, &prob) in p.iter().enumerate() {
                if prob > 0.0 {
                    prop_assert!(supported.contains(&(tok as u32)));
                }
            }
        }

        #[test]
        fn lambda_continuity_bounds_total_variation(
            lambda in 0.0f64..0.9,
            delta in 0.0f64..0.1,
            ctx in proptest::collection::vec(4u32..16, 0..6),
        ) {
            let (a, _, _) = built_model(lambda, 3);
            let (b, _, _) = built_model(lambda + delta, 3);
            let seq = TokenSeq::new(ctx);
            let pa = a.model_next_dist(&seq).unwrap().probs;
            let pb = b.model_next_dist(&seq).unwrap().probs;
            let tv: f64 = 0.5 * pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>();
            prop_assert!(tv <= delta + 1e-12, "tv {tv} > delta {delta}");
        }
    }
}
