//! The attacker-side client: thin retrying wrappers over the two service
//! endpoints. Attack code is written against the `ServiceApi` trait and
//! never touches model internals.

use std::time::Duration;

use serde::Deserialize;

use super::{CompletionRequest, CompletionResponse, PerplexityResponse};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("http {status}: {message}")]
    Http { status: u16, message: String },
    #[error("bad response: {0}")]
    BadResponse(String),
}

impl ClientError {
    fn retryable(&self) -> bool {
        matches!(
            self,
            ClientError::Transport(_) | ClientError::Timeout | ClientError::Http { status: 500..=599, .. }
        )
    }
}

/// The capability surface available to an attacker: perplexity scoring and
/// text completion, nothing else.
pub trait ServiceApi: Sync {
    fn perplexity(&self, text: &str) -> Result<f64, ClientError>;
    fn complete(&self, req: &CompletionRequest) -> Result<String, ClientError>;
}

pub struct ServiceClient {
    base_url: String,
    retries: u32,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

impl ServiceClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration, retries: u32) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            retries,
            agent: config.new_agent(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn post_json<T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<T, ClientError> {
        let url = format!("{}{}", self.base_url, path);
        let mut last = None;
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(20 * attempt as u64));
            }
            match self.post_once(&url, body) {
                Ok(value) => return Ok(value),
                Err(e) if e.retryable() && attempt < self.retries => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn post_once<T: serde::de::DeserializeOwned>(
        &self,
        url: &str,
        body: &serde_json::Value,
    ) -> Result<T, ClientError> {
        let mut response = self
            .agent
            .post(url)
            .send_json(body)
            .map_err(map_transport)?;
        let status = response.status().as_u16();
        if status != 200 {
            let message = response
                .body_mut()
                .read_json::<ErrorBody>()
                .map(|e| e.error)
                .unwrap_or_else(|_| "unparseable error body".to_string());
            return Err(ClientError::Http { status, message });
        }
        response
            .body_mut()
            .read_json::<T>()
            .map_err(|e| ClientError::BadResponse(e.to_string()))
    }

    pub fn healthz(&self) -> Result<(), ClientError> {
        let url = format!("{}/healthz", self.base_url);
        let response = self.agent.get(&url).call().map_err(map_transport)?;
        if response.status().as_u16() == 200 {
            Ok(())
        } else {
            Err(ClientError::Http {
                status: response.status().as_u16(),
                message: "health check failed".to_string(),
            })
        }
    }
}

fn map_transport(e: ureq::Error) -> ClientError {
    match e {
        ureq::Error::Timeout(_) => ClientError::Timeout,
        other => ClientError::Transport(other.to_string()),
    }
}

impl ServiceApi for ServiceClient {
    fn perplexity(&self, text: &str) -> Result<f64, ClientError> {
        let body = serde_json::json!({ "text": text });
        let resp: PerplexityResponse = self.post_json("/v1/perplexity", &body)?;
        Ok(resp.perplexity)
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String, ClientError> {
        let body = serde_json::to_value(req)
            .map_err(|e| ClientError::BadResponse(e.to_string()))?;
        let resp: CompletionResponse = self.post_json("/v1/complete", &body)?;
        Ok(resp.completion)
    }
}
