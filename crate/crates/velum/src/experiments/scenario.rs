//! Scenario orchestration: train encoder variants, assemble datastores,
//! sweep (k, lambda) on validation, deploy the model behind the HTTP
//! service, run both attacks through the client, and report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    default_prompt_bank, eval_targeted, eval_untargeted, rank_top_n, run_targeted,
    run_untargeted, ReferenceLm, TargetedConfig, TargetedCounts, UntargetedConfig,
};
use crate::corpus::{build_vocab, split_corpus, Corpus, Document, Origin, TokenSeq, Vocabulary};
use crate::datastore::Datastore;
use crate::knnlm::{KnnLm, KnnLmConfig, KnnLmError};
use crate::lm::{GenConfig, LmConfig, LmParams, TrainConfig};
use crate::pii::{sanitize, unique_pii, PiiKind, PiiPool, SanitizeStrategy};
use crate::service::{serve, ServiceClient, ServiceConfig};

use super::synth::{synth_corpus, synth_pii_pool, GroundTruth, SynthSpec};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("empty sweep grid")]
    EmptyGrid,
    #[error("no usable validation documents")]
    EmptyValidation,
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
}

fn stage<T, E: std::fmt::Display>(
    name: &'static str,
    result: Result<T, E>,
) -> Result<T, ScenarioError> {
    result.map_err(|e| ScenarioError::Stage {
        stage: name,
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SanitizeKind {
    EndOfText,
    DummyPii,
    RandomPublicPii,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderSel {
    /// Trained on public data only.
    Public,
    /// Public encoder fine-tuned on the private training split.
    Private,
    /// Public encoder fine-tuned on the sanitized private training split.
    Sanitized(SanitizeKind),
    /// Fine-tuned on all private data plus `r * |private|` public documents.
    Mixed { r: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatastoreSel {
    None,
    Private,
    Public,
    Sanitized(SanitizeKind),
    /// Entry-level subsamples of the public and private stores; `None` takes
    /// everything.
    Mixed {
        n_pub: Option<usize>,
        n_priv: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub targeted_candidates: usize,
    pub targeted_top_n: usize,
    pub untargeted_candidates: usize,
    pub untargeted_top_n: usize,
    pub context_len: usize,
    pub rouge_threshold: f64,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub repetition_penalty: f64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            targeted_candidates: 240,
            targeted_top_n: 160,
            untargeted_candidates: 240,
            untargeted_top_n: 160,
            context_len: 10,
            rouge_threshold: 0.5,
            max_new_tokens: 20,
            temperature: 1.0,
            repetition_penalty: crate::lm::DEFAULT_REPETITION_PENALTY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub encoder_train: EncoderSel,
    pub datastore: DatastoreSel,
    /// Defaults to `encoder_train`; also provides the parametric
    /// distribution.
    #[serde(default)]
    pub query_encoder: Option<EncoderSel>,
    /// Defaults to `encoder_train`; used to build datastore keys.
    #[serde(default)]
    pub key_encoder: Option<EncoderSel>,
    pub k_grid: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    pub temperature: f64,
    pub attack: AttackSpec,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(name: impl Into<String>, encoder: EncoderSel, datastore: DatastoreSel) -> Self {
        Self {
            name: name.into(),
            encoder_train: encoder,
            datastore,
            query_encoder: None,
            key_encoder: None,
            k_grid: vec![4, 8, 16, 32, 64],
            lambda_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            temperature: 1.0,
            attack: AttackSpec::default(),
            seed: 17,
        }
    }
}

/// Inputs shared by every scenario: corpora, vocabulary, training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabSpec {
    pub synth: SynthSpec,
    pub lm: LmConfig,
    pub train: TrainConfig,
    pub public_epochs: usize,
    pub finetune_epochs: usize,
    pub vocab_cap: usize,
    pub pool_per_kind: usize,
    pub split_seed: u64,
}

impl Default for LabSpec {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            lm: LmConfig::default(),
            train: TrainConfig {
                learning_rate: 0.25,
                epochs: 0, // set per phase
                batch_size: 16,
                gradient_clip_norm: 1.0,
                seed: 0,
            },
            public_epochs: 12,
            finetune_epochs: 10,
            vocab_cap: 4096,
            pool_per_kind: 60,
            split_seed: 101,
        }
    }
}

/// The shared experimental bench: generated corpora and splits, the common
/// vocabulary, and caches of trained encoders and built datastores.
pub struct Lab {
    pub spec: LabSpec,
    pub vocab: Arc<Vocabulary>,
    pub public_train: Corpus,
    /// Public chunk source for untargeted candidate seeding.
    pub public_seed: Corpus,
    /// Public text held out of all training, for calibration baselines.
    pub public_fresh: Corpus,
    pub private_train: Corpus,
    pub private_valid: Corpus,
    pub private_eval: Corpus,
    pub ground_truth: GroundTruth,
    /// Unique identifiers of the deployed (training) private split.
    pub train_pii: BTreeMap<PiiKind, BTreeSet<String>>,
    pub pool: PiiPool,
    pub prompts: BTreeMap<PiiKind, Vec<String>>,
    encoders: Mutex<HashMap<String, Arc<LmParams>>>,
    datastores: Mutex<HashMap<String, Arc<Datastore>>>,
}

/// Builds the single vocabulary shared by every scenario part: both corpora
/// plus every surface sanitization or prompting can introduce, so no
/// pipeline step hits `<unk>`.
pub fn build_shared_vocab(
    public: &Corpus,
    private: &Corpus,
    pool: &PiiPool,
    prompts: &BTreeMap<PiiKind, Vec<String>>,
    cap: usize,
) -> Result<Vocabulary, ScenarioError> {
    let mut lexicon: Vec<String> = Vec::new();
    lexicon.extend(pool.phones.iter().cloned());
    lexicon.extend(pool.emails.iter().cloned());
    lexicon.extend(pool.urls.iter().cloned());
    lexicon.push(crate::pii::DUMMY_PHONE.to_string());
    lexicon.push(crate::pii::DUMMY_EMAIL.to_string());
    lexicon.push(crate::pii::DUMMY_URL.to_string());
    for list in prompts.values() {
        lexicon.extend(list.iter().cloned());
    }
    let mut vocab_docs: Vec<Document> = Vec::new();
    let mut next_id = 0u32;
    for doc in public.documents.iter().chain(&private.documents) {
        vocab_docs.push(Document {
            id: next_id,
            raw_text: doc.raw_text.clone(),
            tokens: TokenSeq::default(),
            origin: doc.origin,
        });
        next_id += 1;
    }
    vocab_docs.push(Document {
        id: next_id,
        raw_text: lexicon.join(" "),
        tokens: TokenSeq::default(),
        origin: Origin::Synthetic,
    });
    let vocab_corpus = Corpus {
        documents: vocab_docs,
        label: "vocab".to_string(),
    };
    stage("vocab", build_vocab(&vocab_corpus, cap))
}

impl Lab {
    pub fn new(spec: LabSpec) -> Result<Lab, ScenarioError> {
        let (public, private, ground_truth) = stage("synth", synth_corpus(&spec.synth))?;
        let pool = synth_pii_pool(spec.pool_per_kind, spec.synth.seed.wrapping_add(1));
        let prompts = default_prompt_bank();
        let vocab = Arc::new(build_shared_vocab(
            &public,
            &private,
            &pool,
            &prompts,
            spec.vocab_cap,
        )?);

        let (private_train, private_valid, private_eval) = stage(
            "split",
            split_corpus(&private, (0.8, 0.1, 0.1), spec.split_seed),
        )?;
        let (public_train, public_seed, public_fresh) = stage(
            "split",
            split_corpus(&public, (0.7, 0.15, 0.15), spec.split_seed.wrapping_add(1)),
        )?;

        let private_train = private_train.with_tokens(&vocab);
        let train_pii = unique_pii(&private_train);
        Ok(Lab {
            vocab: vocab.clone(),
            public_train: public_train.with_tokens(&vocab),
            public_seed: public_seed.with_tokens(&vocab),
            public_fresh: public_fresh.with_tokens(&vocab),
            private_train,
            private_valid: private_valid.with_tokens(&vocab),
            private_eval: private_eval.with_tokens(&vocab),
            ground_truth,
            train_pii,
            pool,
            prompts,
            encoders: Mutex::new(HashMap::new()),
            datastores: Mutex::new(HashMap::new()),
            spec,
        })
    }

    fn strategy_for(&self, kind: SanitizeKind) -> SanitizeStrategy {
        match kind {
            SanitizeKind::EndOfText => SanitizeStrategy::EndOfText,
            SanitizeKind::DummyPii => SanitizeStrategy::DummyPii,
            SanitizeKind::RandomPublicPii => SanitizeStrategy::RandomPublicPii {
                pool: self.pool.clone(),
                seed: self.spec.synth.seed.wrapping_add(50),
            },
        }
    }

    /// The sanitized private training split (used for both encoder training
    /// and datastore construction).
    pub fn sanitized_private_train(&self, kind: SanitizeKind) -> Result<Corpus, ScenarioError> {
        let sanitized = stage(
            "sanitize",
            sanitize(&self.private_train, &self.strategy_for(kind)),
        )?;
        Ok(sanitized.with_tokens(&self.vocab))
    }

    /// Returns (training, or loading from cache) the selected encoder.
    pub fn encoder(&self, sel: &EncoderSel) -> Result<Arc<LmParams>, ScenarioError> {
        let key = serde_json::to_string(sel)?;
        if let Some(p) = self.encoders.lock().unwrap().get(&key) {
            return Ok(p.clone());
        }
        let trained = self.build_encoder(sel)?;
        self.encoders
            .lock()
            .unwrap()
            .insert(key, trained.clone());
        Ok(trained)
    }

    fn train_cfg(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            ..self.spec.train
        }
    }

    fn build_encoder(&self, sel: &EncoderSel) -> Result<Arc<LmParams>, ScenarioError> {
        match sel {
            EncoderSel::Public => {
                let init = LmParams::init(self.spec.lm, &self.vocab);
                let (trained, _) = stage(
                    "train-public",
                    init.train(&self.public_train, &self.train_cfg(self.spec.public_epochs)),
                )?;
                Ok(Arc::new(trained))
            }
            EncoderSel::Private => {
                let base = self.encoder(&EncoderSel::Public)?;
                let (trained, _) = stage(
                    "train-private",
                    base.train(&self.private_train, &self.train_cfg(self.spec.finetune_epochs)),
                )?;
                Ok(Arc::new(trained))
            }
            EncoderSel::Sanitized(kind) => {
                let base = self.encoder(&EncoderSel::Public)?;
                let corpus = self.sanitized_private_train(*kind)?;
                let (trained, _) = stage(
                    "train-sanitized",
                    base.train(&corpus, &self.train_cfg(self.spec.finetune_epochs)),
                )?;
                Ok(Arc::new(trained))
            }
            EncoderSel::Mixed { r } => {
                let base = self.encoder(&EncoderSel::Public)?;
                let n_extra = ((self.private_train.len() as f64 * r).round() as usize)
                    .min(self.public_train.len());
                let mut order: Vec<usize> = (0..self.public_train.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(
                    self.spec.split_seed.wrapping_add(7),
                ));
                let mut documents: Vec<Document> = self.private_train.documents.clone();
                for &i in order.iter().take(n_extra) {
                    documents.push(self.public_train.documents[i].clone());
                }
                for (i, doc) in documents.iter_mut().enumerate() {
                    doc.id = i as u32;
                }
                let mixed = Corpus {
                    documents,
                    label: format!("mixed-r{r}"),
                };
                let (trained, _) = stage(
                    "train-mixed",
                    base.train(&mixed, &self.train_cfg(self.spec.finetune_epochs)),
                )?;
                Ok(Arc::new(trained))
            }
        }
    }

    /// Returns (building, or loading from cache) the selected datastore,
    /// keyed by the chosen key encoder.
    pub fn datastore(
        &self,
        sel: &DatastoreSel,
        key_encoder: &EncoderSel,
    ) -> Result<Arc<Datastore>, ScenarioError> {
        let key = serde_json::to_string(&(sel, key_encoder))?;
        if let Some(ds) = self.datastores.lock().unwrap().get(&key) {
            return Ok(ds.clone());
        }
        let built: Arc<Datastore> = match sel {
            DatastoreSel::None => Arc::new(Datastore::empty(
                self.spec.lm.hidden_dim,
                "none",
            )),
            DatastoreSel::Private => {
                let enc = self.encoder(key_encoder)?;
                Arc::new(stage(
                    "build-datastore",
                    Datastore::build(&enc, &self.private_train),
                )?)
            }
            DatastoreSel::Public => {
                let enc = self.encoder(key_encoder)?;
                Arc::new(stage(
                    "build-datastore",
                    Datastore::build(&enc, &self.public_train),
                )?)
            }
            DatastoreSel::Sanitized(kind) => {
                let enc = self.encoder(key_encoder)?;
                let corpus = self.sanitized_private_train(*kind)?;
                Arc::new(stage(
                    "build-datastore",
                    Datastore::build(&enc, &corpus),
                )?)
            }
            DatastoreSel::Mixed { n_pub, n_priv } => {
                let public = self.datastore(&DatastoreSel::Public, key_encoder)?;
                let private = self.datastore(&DatastoreSel::Private, key_encoder)?;
                Arc::new(stage(
                    "compose-datastore",
                    Datastore::compose(
                        &public,
                        &private,
                        *n_pub,
                        *n_priv,
                        self.spec.split_seed.wrapping_add(9),
                    ),
                )?)
            }
        };
        self.datastores.lock().unwrap().insert(key, built.clone());
        Ok(built)
    }

    /// Assembles the deployable model for a scenario at a given (k, lambda).
    pub fn model_at(
        &self,
        cfg: &ScenarioConfig,
        k: usize,
        lambda: f64,
    ) -> Result<KnnLm, ScenarioError> {
        let q_sel = cfg.query_encoder.clone().unwrap_or(cfg.encoder_train.clone());
        let k_sel = cfg.key_encoder.clone().unwrap_or(cfg.encoder_train.clone());
        let query = self.encoder(&q_sel)?;
        let ds = self.datastore(&cfg.datastore, &k_sel)?;
        let knn_cfg = stage(
            "model-config",
            KnnLmConfig::with_temperature(k, lambda, cfg.temperature),
        )?;
        stage("model", KnnLm::new(query, ds, knn_cfg))
    }

    pub fn reference_lm(&self) -> Result<ReferenceLm, ScenarioError> {
        Ok(ReferenceLm::new(
            self.encoder(&EncoderSel::Public)?,
            self.vocab.clone(),
        ))
    }

    /// Mean per-document perplexity of the interpolated model over a corpus.
    pub fn mean_model_perplexity(
        &self,
        model: &KnnLm,
        corpus: &Corpus,
    ) -> Result<f64, ScenarioError> {
        mean_model_perplexity(model, corpus)
    }
}

pub fn mean_model_perplexity(model: &KnnLm, corpus: &Corpus) -> Result<f64, ScenarioError> {
    let docs: Vec<&TokenSeq> = corpus
        .documents
        .iter()
        .map(|d| &d.tokens)
        .filter(|t| !t.is_empty())
        .collect();
    if docs.is_empty() {
        return Err(ScenarioError::EmptyValidation);
    }
    let ppls: Vec<Result<f64, KnnLmError>> = docs
        .par_iter()
        .map(|seq| model.model_perplexity(seq))
        .collect();
    let mut total = 0.0;
    for p in ppls {
        total += stage("perplexity", p)?;
    }
    Ok(total / docs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub lambda: f64,
    pub valid_ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub best_k: usize,
    pub best_lambda: f64,
    pub table: Vec<SweepPoint>,
}

/// Evaluates mean validation perplexity over the grid and returns the
/// argmin, ties resolved toward smaller k then smaller lambda.
pub fn sweep<F>(
    factory: F,
    k_grid: &[usize],
    lambda_grid: &[f64],
    valid: &Corpus,
) -> Result<SweepOutcome, ScenarioError>
where
    F: Fn(usize, f64) -> Result<KnnLm, ScenarioError>,
{
    if k_grid.is_empty() || lambda_grid.is_empty() {
        return Err(ScenarioError::EmptyGrid);
    }
    let mut table = Vec::with_capacity(k_grid.len() * lambda_grid.len());
    let mut best: Option<SweepPoint> = None;
    for &k in k_grid {
        for &lambda in lambda_grid {
            let model = factory(k, lambda)?;
            let valid_ppl = mean_model_perplexity(&model, valid)?;
            let point = SweepPoint { k, lambda, valid_ppl };
            if best.map_or(true, |b| valid_ppl < b.valid_ppl) {
                best = Some(point);
            }
            table.push(point);
        }
    }
    let best = best.expect("non-empty grid");
    Ok(SweepOutcome {
        best_k: best.k,
        best_lambda: best.lambda,
        table,
    })
}

/// One scenario's results, mirroring the report table columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub config: ScenarioConfig,
    pub chosen_k: usize,
    pub chosen_lambda: f64,
    pub sweep: Vec<SweepPoint>,
    pub eval_ppl: f64,
    pub targeted_total: usize,
    pub targeted_phone: usize,
    pub targeted_email: usize,
    pub targeted_url: usize,
    pub untargeted_good: usize,
}

impl Lab {
    /// Runs the full pipeline for one scenario: sweep, deploy over HTTP,
    /// attack through the client, evaluate.
    pub fn run_scenario(&self, cfg: &ScenarioConfig) -> Result<ScenarioReport, ScenarioError> {
        let outcome = sweep(
            |k, lambda| self.model_at(cfg, k, lambda),
            &cfg.k_grid,
            &cfg.lambda_grid,
            &self.private_valid,
        )?;
        let model = Arc::new(self.model_at(cfg, outcome.best_k, outcome.best_lambda)?);

        let service_cfg = ServiceConfig {
            addr: "127.0.0.1:0".to_string(),
            ..ServiceConfig::default()
        };
        let service = stage(
            "serve",
            serve(model.clone(), self.vocab.clone(), &service_cfg),
        )?;
        let client = ServiceClient::new(service.url(), Duration::from_secs(30), 3);
        let reference = self.reference_lm()?;

        let gen = GenConfig::sample(cfg.attack.temperature, cfg.seed, cfg.attack.max_new_tokens)
            .with_penalty(cfg.attack.repetition_penalty);

        let targeted_cfg = TargetedConfig {
            prompts: self.prompts.clone(),
            num_candidates: cfg.attack.targeted_candidates,
            top_n: cfg.attack.targeted_top_n,
            gen,
        };
        let targeted = stage(
            "targeted-attack",
            run_targeted(&client, &reference, &targeted_cfg),
        )?;
        let top = stage(
            "targeted-rank",
            rank_top_n(&targeted, cfg.attack.targeted_top_n.min(targeted.len())),
        )?;
        let counts: TargetedCounts = eval_targeted(&self.train_pii, &top);

        let untargeted_cfg = UntargetedConfig {
            public_seed_corpus: self.public_seed.clone(),
            context_len: cfg.attack.context_len,
            num_candidates: cfg.attack.untargeted_candidates,
            top_n: cfg.attack.untargeted_top_n,
            rouge_threshold: cfg.attack.rouge_threshold,
            gen,
            seed: cfg.seed.wrapping_add(1),
        };
        let untargeted = stage(
            "untargeted-attack",
            run_untargeted(&client, &reference, &untargeted_cfg),
        )?;
        let top_untargeted = stage(
            "untargeted-rank",
            rank_top_n(&untargeted, cfg.attack.untargeted_top_n.min(untargeted.len())),
        )?;
        let recon = stage(
            "untargeted-eval",
            eval_untargeted(
                &self.private_train,
                &top_untargeted,
                cfg.attack.rouge_threshold,
            ),
        )?;
        service.stop();

        let eval_ppl = mean_model_perplexity(&model, &self.private_eval)?;
        Ok(ScenarioReport {
            name: cfg.name.clone(),
            config: cfg.clone(),
            chosen_k: outcome.best_k,
            chosen_lambda: outcome.best_lambda,
            sweep: outcome.table,
            eval_ppl,
            targeted_total: counts.total(),
            targeted_phone: counts.phone,
            targeted_email: counts.email,
            targeted_url: counts.url,
            untargeted_good: recon.good_count,
        })
    }
}

/// A lab spec plus the scenario list to run over it; the unit the CLI's
/// `scenario` subcommand consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub lab: LabSpec,
    pub scenarios: Vec<ScenarioConfig>,
}

impl Default for ExperimentPlan {
    /// The default plan walks the leakage ladder: parametric public,
    /// parametric private, retrieval over a private store, then the
    /// sanitized and public-store mitigations.
    fn default() -> Self {
        let mut scenarios = vec![
            ScenarioConfig::new("public-lm", EncoderSel::Public, DatastoreSel::None),
            ScenarioConfig::new("private-lm", EncoderSel::Private, DatastoreSel::None),
            ScenarioConfig::new(
                "private-knnlm",
                EncoderSel::Private,
                DatastoreSel::Private,
            ),
            ScenarioConfig::new(
                "sanitized-knnlm",
                EncoderSel::Sanitized(SanitizeKind::DummyPii),
                DatastoreSel::Sanitized(SanitizeKind::DummyPii),
            ),
            ScenarioConfig::new(
                "public-store-knnlm",
                EncoderSel::Private,
                DatastoreSel::Public,
            ),
            ScenarioConfig::new(
                "mixed-encoder-knnlm",
                EncoderSel::Mixed { r: 0.05 },
                DatastoreSel::Public,
            ),
        ];
        for s in &mut scenarios {
            s.k_grid = vec![4, 8, 16, 32, 64];
            s.lambda_grid = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        }
        ExperimentPlan {
            lab: LabSpec::default(),
            scenarios,
        }
    }
}

/// Run directory name: short hash of the plan JSON plus the seed.
pub fn run_dir_name(plan_json: &str, seed: u64) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(plan_json.as_bytes());
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("{hex}-{seed}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_single_point_returns_it() {
        let spec = tiny_lab_spec();
        let lab = Lab::new(spec).unwrap();
        let cfg = ScenarioConfig::new("t", EncoderSel::Public, DatastoreSel::Private);
        let outcome = sweep(
            |k, lambda| lab.model_at(&cfg, k, lambda),
            &[4],
            &[0.3],
            &lab.private_valid,
        )
        .unwrap();
        assert_eq!((outcome.best_k, outcome.best_lambda), (4, 0.3));
        assert_eq!(outcome.table.len(), 1);
    }

    #[test]
    fn sweep_best_attains_table_minimum() {
        let spec = tiny_lab_spec();
        let lab = Lab::new(spec).unwrap();
        let cfg = ScenarioConfig::new("t", EncoderSel::Public, DatastoreSel::Private);
        let outcome = sweep(
            |k, lambda| lab.model_at(&cfg, k, lambda),
            &[2, 4],
            &[0.1, 0.4],
            &lab.private_valid,
        )
        .unwrap();
        let min = outcome
            .table
            .iter()
            .map(|p| p.valid_ppl)
            .fold(f64::INFINITY, f64::min);
        let chosen = outcome
            .table
            .iter()
            .find(|p| p.k == outcome.best_k && p.lambda == outcome.best_lambda)
            .unwrap();
        assert_eq!(chosen.valid_ppl, min);
        assert!(matches!(
            sweep(
                |k, lambda| lab.model_at(&cfg, k, lambda),
                &[],
                &[0.1],
                &lab.private_valid
            ),
            Err(ScenarioError::EmptyGrid)
        ));
    }

    pub(super) fn tiny_lab_spec() -> LabSpec {
        LabSpec {
            synth: SynthSpec {
                n_private_docs: 60,
                n_public_docs: 60,
                doc_len: (10, 18),
                pii_per_kind: 8,
                pii_density: 1.0,
                templates: Default::default(),
                seed: 3,
            },
            lm: LmConfig {
                embed_dim: 16,
                hidden_dim: 16,
                context_window: 24,
                seed: 1,
            },
            train: TrainConfig {
                learning_rate: 0.3,
                epochs: 0,
                batch_size: 16,
                gradient_clip_norm: 1.0,
                seed: 2,
            },
            public_epochs: 2,
            finetune_epochs: 2,
            vocab_cap: 4096,
            pool_per_kind: 12,
            split_seed: 5,
        }
    }

    #[test]
    fn encoders_and_datastores_are_cached() {
        let lab = Lab::new(tiny_lab_spec()).unwrap();
        let a = lab.encoder(&EncoderSel::Public).unwrap();
        let b = lab.encoder(&EncoderSel::Public).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        let d1 = lab
            .datastore(&DatastoreSel::Private, &EncoderSel::Public)
            .unwrap();
        let d2 = lab
            .datastore(&DatastoreSel::Private, &EncoderSel::Public)
            .unwrap();
        assert!(Arc::ptr_eq(&d1, &d2));
        assert!(!d1.is_empty());
        let none = lab
            .datastore(&DatastoreSel::None, &EncoderSel::Public)
            .unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn mixed_datastore_sizes_add() {
        let lab = Lab::new(tiny_lab_spec()).unwrap();
        let public = lab
            .datastore(&DatastoreSel::Public, &EncoderSel::Public)
            .unwrap();
        let mixed = lab
            .datastore(
                &DatastoreSel::Mixed {
                    n_pub: None,
                    n_priv: Some(10),
                },
                &EncoderSel::Public,
            )
            .unwrap();
        assert_eq!(mixed.len(), public.len() + 10);
    }

    #[test]
    fn run_dir_name_is_stable() {
        let a = run_dir_name("{\"x\":1}", 7);
        let b = run_dir_name("{\"x\":1}", 7);
        assert_eq!(a, b);
        assert!(a.ends_with("-7"));
        assert_ne!(a, run_dir_name("{\"x\":2}", 7));
    }
}
