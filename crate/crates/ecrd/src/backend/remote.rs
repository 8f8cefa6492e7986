//! HTTP client for remote next-token and conditional scoring providers.
//!
//! The native wire is a single POST of
//! `{"prefix_tokens": [...], "context_id": "...", "top_k": N}` answered by
//! `{"tokens": [ids], "logprobs": [floats]}`. An adapter translates to the
//! completions-with-logprobs convention used by popular serving stacks.
//!
//! Transport is pluggable so contract tests run against recorded responses.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::{
    BackendCapabilities, BackendError, ConditioningContext, GenerationBackend, ScoringBackend,
    Vocabulary,
};
use crate::dist::{TokenDistribution, TokenId};

/// Probability assigned to a requested token missing from a remote top-k
/// response, applied before any prefix averaging. Remote providers truncate
/// logprobs; a hard zero would blow the pooled score up to infinity.
pub const MISSING_TOKEN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            backoff_ms: 100,
        }
    }
}

/// Wire convention spoken by the endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WireFormat {
    /// The native prefix-tokens/logprobs wire.
    #[default]
    Native,
    /// Completions-with-logprobs; requires a vocabulary to map surfaces
    /// to token ids.
    Completions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Name of the environment variable holding the bearer token, if any.
    /// The credential itself is never part of the configuration.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default)]
    pub wire: WireFormat,
    /// Ask the server to bypass its caches for this client's requests.
    #[serde(default)]
    pub no_cache: bool,
}

fn default_timeout_s() -> f64 {
    30.0
}

fn default_top_k() -> usize {
    20
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_s: default_timeout_s(),
            top_k: default_top_k(),
            retry: RetryPolicy::default(),
            auth_env: None,
            wire: WireFormat::default(),
            no_cache: false,
        }
    }
}

/// Minimal POST-a-JSON-document transport.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        body: &serde_json::Value,
        bearer: Option<&str>,
        timeout: Duration,
    ) -> Result<serde_json::Value, BackendError>;
}

/// Production transport backed by a blocking HTTP client.
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Self {
        Self {
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Default for ReqwestTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        body: &serde_json::Value,
        bearer: Option<&str>,
        timeout: Duration,
    ) -> Result<serde_json::Value, BackendError> {
        let mut request = self.client.post(url).json(body).timeout(timeout);
        if let Some(token) = bearer {
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout {
                    timeout_s: timeout.as_secs_f64(),
                    retries_attempted: 0,
                }
            } else {
                BackendError::Transport {
                    message: e.to_string(),
                    retryable: e.is_connect() || e.is_request(),
                }
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            return Err(BackendError::Transport {
                message: format!("status {status}"),
                retryable: status.is_server_error(),
            });
        }
        response
            .json()
            .map_err(|e| BackendError::MalformedResponse {
                message: e.to_string(),
            })
    }
}

/// Client for a remote model exposing top-k logprobs.
pub struct RemoteModelClient {
    config: RemoteConfig,
    transport: Arc<dyn HttpTransport>,
    vocab: Option<Vocabulary>,
}

#[derive(Deserialize)]
struct NativeResponse {
    tokens: Vec<u32>,
    logprobs: Vec<f64>,
}

impl RemoteModelClient {
    pub fn new(config: RemoteConfig) -> Self {
        Self {
            config,
            transport: Arc::new(ReqwestTransport::new()),
            vocab: None,
        }
    }

    /// Substitutes the transport; used by contract tests with recorded
    /// responses.
    pub fn with_transport(mut self, transport: Arc<dyn HttpTransport>) -> Self {
        self.transport = transport;
        self
    }

    /// Attaches a local vocabulary for tokenization and display surfaces.
    /// The wire itself only ever carries token ids.
    pub fn with_vocabulary(mut self, vocab: Vocabulary) -> Self {
        self.vocab = Some(vocab);
        self
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn bearer(&self) -> Option<String> {
        self.config
            .auth_env
            .as_ref()
            .and_then(|name| std::env::var(name).ok())
    }

    fn post_with_retries(
        &self,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, BackendError> {
        let timeout = Duration::from_secs_f64(self.config.timeout_s);
        let bearer = self.bearer();
        let mut attempt = 0;
        loop {
            let result =
                self.transport
                    .post_json(&self.config.endpoint, body, bearer.as_deref(), timeout);
            match result {
                Ok(value) => return Ok(value),
                Err(err) => {
                    let retryable = matches!(
                        err,
                        BackendError::Timeout { .. }
                            | BackendError::Transport {
                                retryable: true,
                                ..
                            }
                    );
                    if !retryable || attempt >= self.config.retry.max_retries {
                        return Err(match err {
                            BackendError::Timeout { timeout_s, .. } => BackendError::Timeout {
                                timeout_s,
                                retries_attempted: attempt,
                            },
                            other => other,
                        });
                    }
                    attempt += 1;
                    if self.config.retry.backoff_ms > 0 {
                        std::thread::sleep(Duration::from_millis(
                            self.config.retry.backoff_ms * attempt as u64,
                        ));
                    }
                }
            }
        }
    }

    fn request_body(&self, prefix: &[TokenId], ctx: &ConditioningContext) -> serde_json::Value {
        match self.config.wire {
            WireFormat::Native => {
                let mut body = json!({
                    "prefix_tokens": prefix.iter().map(|t| t.0).collect::<Vec<_>>(),
                    "context_id": ctx.context_id,
                    "top_k": self.config.top_k,
                });
                if self.config.no_cache {
                    body["no_cache"] = json!(true);
                }
                body
            }
            WireFormat::Completions => completions::request_body(
                prefix,
                self.config.top_k,
                self.vocab.as_ref(),
                self.config.no_cache,
            ),
        }
    }

    fn parse_distribution(
        &self,
        value: serde_json::Value,
    ) -> Result<TokenDistribution, BackendError> {
        let pairs = match self.config.wire {
            WireFormat::Native => {
                let response: NativeResponse =
                    serde_json::from_value(value).map_err(|e| BackendError::MalformedResponse {
                        message: e.to_string(),
                    })?;
                if response.tokens.len() != response.logprobs.len() {
                    return Err(BackendError::MalformedResponse {
                        message: format!(
                            "{} tokens but {} logprobs",
                            response.tokens.len(),
                            response.logprobs.len()
                        ),
                    });
                }
                response
                    .tokens
                    .into_iter()
                    .map(TokenId)
                    .zip(response.logprobs)
                    .collect::<Vec<_>>()
            }
            WireFormat::Completions => completions::parse_response(&value, self.vocab.as_ref())?,
        };
        let entries: Vec<(TokenId, f64)> = pairs
            .into_iter()
            .map(|(t, lp)| (t, lp.exp().clamp(0.0, 1.0)))
            .collect();
        let enumerated: f64 = entries.iter().map(|&(_, p)| p).sum();
        let residual = (1.0 - enumerated).clamp(0.0, 1.0);
        let vocab_size = self.vocab.as_ref().map(Vocabulary::len).unwrap_or(0);
        Ok(TokenDistribution::new(vocab_size, entries, residual)?)
    }

    fn distribution(
        &self,
        prefix: &[TokenId],
        ctx: &ConditioningContext,
    ) -> Result<TokenDistribution, BackendError> {
        let body = self.request_body(prefix, ctx);
        let response = self.post_with_retries(&body)?;
        self.parse_distribution(response)
    }

    fn caps(&self) -> BackendCapabilities {
        BackendCapabilities {
            max_top_k: self.config.top_k,
            concurrent: true,
            tokenizer_id: format!("remote:{}", self.config.endpoint),
        }
    }
}

impl GenerationBackend for RemoteModelClient {
    fn capabilities(&self) -> BackendCapabilities {
        self.caps()
    }

    fn next_distribution(
        &self,
        prefix: &[TokenId],
        ctx: &ConditioningContext,
    ) -> Result<TokenDistribution, BackendError> {
        self.distribution(prefix, ctx)
    }

    fn surface(&self, token: TokenId) -> Option<String> {
        self.vocab
            .as_ref()
            .and_then(|v| v.surface(token))
            .map(str::to_string)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        match &self.vocab {
            Some(vocab) => Ok(vocab.tokenize(text)),
            None => Err(BackendError::NoTokenizer(
                "remote client has no local vocabulary; attach one with with_vocabulary".into(),
            )),
        }
    }
}

impl ScoringBackend for RemoteModelClient {
    fn capabilities(&self) -> BackendCapabilities {
        self.caps()
    }

    /// Requested tokens absent from the returned top-k get
    /// [`MISSING_TOKEN_FLOOR`] rather than zero.
    fn score_conditionals(
        &self,
        tokens: &[TokenId],
        prefix: &[TokenId],
        ctx: &ConditioningContext,
    ) -> Result<Vec<f64>, BackendError> {
        let dist = self.distribution(prefix, ctx)?;
        Ok(tokens
            .iter()
            .map(|&t| {
                let p = dist.prob(t);
                if p > 0.0 {
                    p
                } else {
                    MISSING_TOKEN_FLOOR
                }
            })
            .collect())
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        GenerationBackend::tokenize(self, text)
    }
}

/// Adapter to and from the completions-with-logprobs convention.
pub mod completions {
    use super::*;

    pub fn request_body(
        prefix: &[TokenId],
        top_k: usize,
        vocab: Option<&Vocabulary>,
        no_cache: bool,
    ) -> serde_json::Value {
        let prompt = match vocab {
            Some(v) => prefix
                .iter()
                .filter_map(|&t| v.surface(t))
                .collect::<Vec<_>>()
                .join(" "),
            None => String::new(),
        };
        let mut body = json!({
            "prompt": prompt,
            "max_tokens": 1,
            "logprobs": top_k,
            "echo": false,
        });
        if no_cache {
            body["no_cache"] = json!(true);
        }
        body
    }

    pub fn parse_response(
        value: &serde_json::Value,
        vocab: Option<&Vocabulary>,
    ) -> Result<Vec<(TokenId, f64)>, BackendError> {
        let vocab = vocab.ok_or_else(|| {
            BackendError::NoTokenizer("completions wire requires a local vocabulary".into())
        })?;
        let top = value
            .pointer("/choices/0/logprobs/top_logprobs/0")
            .and_then(|v| v.as_object())
            .ok_or_else(|| BackendError::MalformedResponse {
                message: "missing choices[0].logprobs.top_logprobs[0]".into(),
            })?;
        let mut pairs = Vec::with_capacity(top.len());
        for (surface, lp) in top {
            let lp = lp.as_f64().ok_or_else(|| BackendError::MalformedResponse {
                message: format!("non-numeric logprob for {surface:?}"),
            })?;
            // Surfaces outside the local vocabulary cannot be candidates,
            // so they are folded into residual mass by omission.
            if let Some(token) = vocab.id_of(surface.trim()) {
                pairs.push((token, lp));
            }
        }
        pairs.sort_by_key(|&(t, _)| t);
        Ok(pairs)
    }
}
