//! HTTP client for a remote visual decider.
//!
//! Wire: POST `{"context_id", "prefix_tail": [surfaces], "candidates":
//! [{"id", "surface"}]}` answered by `{"chosen_id", "sentence",
//! "annotations": [{"bbox": [...], "label"}]}`. Verdicts are validated
//! client-side so a non-compliant decider surfaces as a typed error the
//! engine can fall back from.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Deserialize;

use crate::backend::remote::{HttpTransport, ReqwestTransport, RetryPolicy};
use crate::backend::BackendError;
use crate::decider::{Decider, DeciderError, DeciderRequest, DeciderVerdict};
use crate::dist::TokenId;
use crate::evidence::RegionAnnotation;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RemoteDeciderConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub auth_env: Option<String>,
}

fn default_timeout_s() -> f64 {
    30.0
}

impl RemoteDeciderConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_s: default_timeout_s(),
            retry: RetryPolicy::default(),
            auth_env: None,
        }
    }
}

#[derive(Deserialize)]
struct WireVerdict {
    chosen_id: u32,
    sentence: String,
    #[serde(default)]
    annotations: Vec<RegionAnnotation>,
}

pub struct RemoteDecider {
    config: RemoteDeciderConfig,
    transport: Arc<dyn HttpTransport>,
}

impl RemoteDecider {
    pub fn new(config: RemoteDeciderConfig) -> Self {
        Self {
            config,
            transport: Arc::new(ReqwestTransport::new()),
        }
    }

    pub fn with_transport(mut self, transport: Arc<dyn HttpTransport>) -> Self {
        self.transport = transport;
        self
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
            match self
                .transport
                .post_json(&self.config.endpoint, body, bearer.as_deref(), timeout)
            {
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
                        return Err(err);
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
}

impl Decider for RemoteDecider {
    fn decide(&self, request: &DeciderRequest) -> Result<DeciderVerdict, DeciderError> {
        if request.candidates.is_empty() {
            return Err(DeciderError::EmptyCandidates);
        }
        let body = serde_json::to_value(request).expect("request serialization cannot fail");
        let start = Instant::now();
        let response = self.post_with_retries(&body)?;
        let wire: WireVerdict =
            serde_json::from_value(response).map_err(|e| BackendError::MalformedResponse {
                message: e.to_string(),
            })?;
        let verdict = DeciderVerdict {
            chosen: TokenId(wire.chosen_id),
            sentence: wire.sentence,
            annotations: wire.annotations,
            latency: start.elapsed(),
        };
        verdict.validate(request)?;
        Ok(verdict)
    }
}
