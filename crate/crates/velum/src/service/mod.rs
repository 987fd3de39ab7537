//! The deployment surface: a JSON-over-HTTP service exposing exactly two
//! model endpoints, plus the client the attacker code talks through.
//!
//! - `POST /v1/perplexity {"text": ...}` -> `{"perplexity": ...}`
//! - `POST /v1/complete {"prompt", "max_new_tokens", "strategy", ...}` ->
//!   `{"completion": ...}`
//! - `GET /healthz` -> `ok`
//!
//! Success responses carry a single key and never include distances,
//! neighbor identities, or parameters.

mod client;

pub use client::{ClientError, ServiceApi, ServiceClient};

use std::io::Read;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{decode_tokens, encode_text, Vocabulary};
use crate::knnlm::{load_bundle, KnnLm, KnnLmError};
use crate::lm::{GenConfig, GenStrategy, DEFAULT_REPETITION_PENALTY};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("bind failed: {0}")]
    Bind(String),
    #[error("bundle path not configured")]
    NoBundle,
    #[error(transparent)]
    Bundle(#[from] KnnLmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Bind address, e.g. `127.0.0.1:7478`; port 0 picks an ephemeral port.
    pub addr: String,
    pub bundle_dir: Option<PathBuf>,
    pub max_body_bytes: usize,
    pub max_tokens: usize,
    pub workers: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:7478".to_string(),
            bundle_dir: None,
            max_body_bytes: 64 * 1024,
            max_tokens: 256,
            workers: 4,
        }
    }
}

#[derive(Debug, Deserialize)]
struct PerplexityRequest {
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerplexityResponse {
    pub perplexity: f64,
}

/// Wire form of a completion call. `strategy` is `greedy`, `beam` or
/// `sample`; unset knobs take the server defaults (beam width 4,
/// temperature 1, seed 0, repetition penalty 0.75).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_new_tokens: usize,
    pub strategy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetition_penalty: Option<f64>,
}

impl CompletionRequest {
    pub fn gen_config(&self) -> Result<GenConfig, String> {
        let strategy = match self.strategy.as_str() {
            "greedy" => GenStrategy::BeamSearch { beam_width: 1 },
            "beam" => GenStrategy::BeamSearch {
                beam_width: self.beam_width.unwrap_or(4),
            },
            "sample" => GenStrategy::Sample {
                temperature: self.temperature.unwrap_or(1.0),
                seed: self.seed.unwrap_or(0),
            },
            other => return Err(format!("unknown strategy {other:?}")),
        };
        Ok(GenConfig {
            strategy,
            max_new_tokens: self.max_new_tokens,
            repetition_penalty: self.repetition_penalty.unwrap_or(DEFAULT_REPETITION_PENALTY),
        })
    }

    /// A request carrying an explicit decoding config.
    pub fn from_gen(prompt: impl Into<String>, gen: &GenConfig) -> Self {
        let mut req = CompletionRequest {
            prompt: prompt.into(),
            max_new_tokens: gen.max_new_tokens,
            strategy: String::new(),
            beam_width: None,
            temperature: None,
            seed: None,
            repetition_penalty: Some(gen.repetition_penalty),
        };
        match gen.strategy {
            GenStrategy::BeamSearch { beam_width } => {
                req.strategy = if beam_width == 1 { "greedy" } else { "beam" }.to_string();
                req.beam_width = Some(beam_width);
            }
            GenStrategy::Sample { temperature, seed } => {
                req.strategy = "sample".to_string();
                req.temperature = Some(temperature);
                req.seed = Some(seed);
            }
        }
        req
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionResponse {
    pub completion: String,
}

struct ServerCtx {
    model: Arc<KnnLm>,
    vocab: Arc<Vocabulary>,
    max_body_bytes: usize,
    max_tokens: usize,
}

/// A service that is accepting requests; dropping it (or calling `stop`)
/// shuts the workers down.
pub struct RunningService {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    shutdown: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl RunningService {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        self.server.unblock();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Starts serving the bundle named by the config.
pub fn serve_bundle(config: &ServiceConfig) -> Result<RunningService, ServiceError> {
    let dir = config.bundle_dir.as_ref().ok_or(ServiceError::NoBundle)?;
    let bundle = load_bundle(dir)?;
    serve(Arc::new(bundle.model), bundle.vocab, config)
}

/// Starts serving an in-memory model.
pub fn serve(
    model: Arc<KnnLm>,
    vocab: Arc<Vocabulary>,
    config: &ServiceConfig,
) -> Result<RunningService, ServiceError> {
    let server = Arc::new(
        tiny_http::Server::http(config.addr.as_str())
            .map_err(|e| ServiceError::Bind(e.to_string()))?,
    );
    let addr = match server.server_addr() {
        tiny_http::ListenAddr::IP(a) => a,
        #[allow(unreachable_patterns)]
        _ => return Err(ServiceError::Bind("non-ip listener".to_string())),
    };
    let shutdown = Arc::new(AtomicBool::new(false));
    let ctx = Arc::new(ServerCtx {
        model,
        vocab,
        max_body_bytes: config.max_body_bytes,
        max_tokens: config.max_tokens.max(1),
    });
    let workers = (0..config.workers.max(1))
        .map(|_| {
            let server = server.clone();
            let shutdown = shutdown.clone();
            let ctx = ctx.clone();
            std::thread::spawn(move || loop {
                if shutdown.load(Ordering::SeqCst) {
                    break;
                }
                match server.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(rq)) => handle(rq, &ctx),
                    Ok(None) => continue,
                    Err(_) => break,
                }
            })
        })
        .collect();
    Ok(RunningService {
        addr,
        server,
        shutdown,
        workers,
    })
}

fn json_response(status: u16, body: String) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
    tiny_http::Response::from_string(body)
        .with_status_code(status)
        .with_header(
            tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).unwrap(),
        )
}

fn error_body(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

enum Reply {
    Ok(String),
    Err(u16, String),
}

fn handle(mut rq: tiny_http::Request, ctx: &ServerCtx) {
    let method = rq.method().clone();
    let url = rq.url().to_string();
    let reply = match (method.as_str(), url.as_str()) {
        ("GET", "/healthz") => {
            let _ = rq.respond(tiny_http::Response::from_string("ok"));
            return;
        }
        ("POST", "/v1/perplexity") => match read_body(&mut rq, ctx.max_body_bytes) {
            Ok(body) => perplexity_endpoint(&body, ctx),
            Err(reply) => reply,
        },
        ("POST", "/v1/complete") => match read_body(&mut rq, ctx.max_body_bytes) {
            Ok(body) => complete_endpoint(&body, ctx),
            Err(reply) => reply,
        },
        _ => Reply::Err(404, "not found".to_string()),
    };
    let response = match reply {
        Reply::Ok(body) => json_response(200, body),
        Reply::Err(status, message) => json_response(status, error_body(&message)),
    };
    let _ = rq.respond(response);
}

fn read_body(rq: &mut tiny_http::Request, max: usize) -> Result<String, Reply> {
    if rq.body_length().is_some_and(|len| len > max) {
        return Err(Reply::Err(413, "request body too large".to_string()));
    }
    let mut body = String::new();
    let mut reader = rq.as_reader().take(max as u64 + 1);
    reader
        .read_to_string(&mut body)
        .map_err(|_| Reply::Err(400, "unreadable body".to_string()))?;
    if body.len() > max {
        return Err(Reply::Err(413, "request body too large".to_string()));
    }
    Ok(body)
}

fn perplexity_endpoint(body: &str, ctx: &ServerCtx) -> Reply {
    let req: PerplexityRequest = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(_) => return Reply::Err(400, "malformed json".to_string()),
    };
    let seq = encode_text(&ctx.vocab, &req.text);
    if seq.is_empty() {
        return Reply::Err(400, "empty text".to_string());
    }
    if seq.len() > ctx.max_tokens {
        return Reply::Err(413, "text exceeds token cap".to_string());
    }
    match ctx.model.model_perplexity(&seq) {
        Ok(perplexity) => Reply::Ok(
            serde_json::to_string(&PerplexityResponse { perplexity })
                .expect("serializable response"),
        ),
        Err(_) => Reply::Err(500, "internal error".to_string()),
    }
}

fn complete_endpoint(body: &str, ctx: &ServerCtx) -> Reply {
    let req: CompletionRequest = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(_) => return Reply::Err(400, "malformed json".to_string()),
    };
    let gen = match req.gen_config() {
        Ok(g) => g,
        Err(msg) => return Reply::Err(400, msg),
    };
    if req.max_new_tokens > ctx.max_tokens {
        return Reply::Err(413, "max_new_tokens exceeds token cap".to_string());
    }
    let prompt = encode_text(&ctx.vocab, &req.prompt);
    if prompt.len() > ctx.max_tokens {
        return Reply::Err(413, "prompt exceeds token cap".to_string());
    }
    let generated = match ctx.model.model_generate(&prompt, &gen) {
        Ok(seq) => seq,
        Err(KnnLmError::Lm(e)) => return Reply::Err(400, e.to_string()),
        Err(_) => return Reply::Err(500, "internal error".to_string()),
    };
    match decode_tokens(&ctx.vocab, &generated) {
        Ok(completion) => Reply::Ok(
            serde_json::to_string(&CompletionResponse { completion })
                .expect("serializable response"),
        ),
        Err(_) => Reply::Err(500, "internal error".to_string()),
    }
}
