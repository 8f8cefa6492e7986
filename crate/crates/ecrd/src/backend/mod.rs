//! Backend abstractions: next-token distribution providers and
//! evidence-prefix conditional scorers.
//!
//! Generation and evidence scoring are kept as two logically distinct
//! handles even when they wrap the same model, so the evidence-scoring pass
//! can run against a separate serving path. Both contracts are
//! deterministic: repeated identical queries must return identical results,
//! which is what makes decode traces replayable.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dist::{DistError, TokenDistribution, TokenId};

pub mod remote;
pub mod tabular;

pub use remote::{RemoteConfig, RemoteModelClient, RetryPolicy, WireFormat};
pub use tabular::TabularModel;

/// What a backend supports; consulted by callers that batch or parallelize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    /// Largest top-k the backend will enumerate in one distribution.
    pub max_top_k: usize,
    /// Whether concurrent queries are permitted. Callers must serialize
    /// calls to backends that report `false`.
    pub concurrent: bool,
    /// Identity of the tokenizer the backend scores under.
    pub tokenizer_id: String,
}

/// Opaque conditioning handle. For real deployments this may reference an
/// image or session on the serving side; it never carries question text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningContext {
    pub context_id: Option<String>,
}

impl ConditioningContext {
    pub fn with_id(id: impl Into<String>) -> Self {
        Self {
            context_id: Some(id.into()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("request timed out after {timeout_s}s ({retries_attempted} retries attempted)")]
    Timeout {
        timeout_s: f64,
        retries_attempted: u32,
    },
    #[error("transport failure{}: {message}", if *.retryable { " (retryable)" } else { "" })]
    Transport { message: String, retryable: bool },
    #[error("malformed response: {message}")]
    MalformedResponse { message: String },
    #[error("invalid model file: {0}")]
    InvalidModel(String),
    #[error("no tokenizer available: {0}")]
    NoTokenizer(String),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// Provides the base next-token distribution at each decoding step.
pub trait GenerationBackend: Send + Sync {
    fn capabilities(&self) -> BackendCapabilities;

    /// Next-token distribution given the decoded prefix. For remote
    /// backends the enumerated entries are the provider's top-k logprobs
    /// exponentiated and `residual_mass` covers the rest.
    fn next_distribution(
        &self,
        prefix: &[TokenId],
        ctx: &ConditioningContext,
    ) -> Result<TokenDistribution, BackendError>;

    /// Display string for a token, when the backend knows one.
    fn surface(&self, token: TokenId) -> Option<String>;

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError>;
}

/// Scores next-token conditionals under evidence prefixes.
pub trait ScoringBackend: Send + Sync {
    fn capabilities(&self) -> BackendCapabilities;

    /// Conditional probability of each requested token given the prefix,
    /// aligned with `tokens`. The empty prefix is the unconditioned case.
    fn score_conditionals(
        &self,
        tokens: &[TokenId],
        prefix: &[TokenId],
        ctx: &ConditioningContext,
    ) -> Result<Vec<f64>, BackendError>;

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError>;
}

/// Vocabulary table mapping token ids to display surfaces.
///
/// Tokenization is whitespace splitting with exact surface lookup; words
/// without a vocabulary entry are dropped from the tokenized form.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    surfaces: Vec<String>,
}

impl Vocabulary {
    pub fn new(surfaces: Vec<String>) -> Self {
        Self { surfaces }
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn surface(&self, token: TokenId) -> Option<&str> {
        self.surfaces.get(token.0 as usize).map(|s| s.as_str())
    }

    pub fn id_of(&self, surface: &str) -> Option<TokenId> {
        self.surfaces
            .iter()
            .position(|s| s == surface)
            .map(|i| TokenId(i as u32))
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .filter_map(|word| self.id_of(word))
            .collect()
    }
}

/// Wraps a scoring backend and counts conditional queries, for verifying
/// the per-step scoring-cost contract (at most `k * sum(L)` conditionals
/// cold, zero warm).
pub struct InstrumentedScoring<B> {
    inner: B,
    calls: AtomicUsize,
    conditionals: AtomicUsize,
}

impl<B: ScoringBackend> InstrumentedScoring<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            conditionals: AtomicUsize::new(0),
        }
    }

    /// Number of `score_conditionals` round trips so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Total (token, prefix) conditionals requested so far.
    pub fn conditionals(&self) -> usize {
        self.conditionals.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.conditionals.store(0, Ordering::SeqCst);
    }
}

impl<B: ScoringBackend> ScoringBackend for InstrumentedScoring<B> {
    fn capabilities(&self) -> BackendCapabilities {
        self.inner.capabilities()
    }

    fn score_conditionals(
        &self,
        tokens: &[TokenId],
        prefix: &[TokenId],
        ctx: &ConditioningContext,
    ) -> Result<Vec<f64>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.conditionals.fetch_add(tokens.len(), Ordering::SeqCst);
        self.inner.score_conditionals(tokens, prefix, ctx)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        self.inner.tokenize(text)
    }
}

/// Serializes calls to a backend whose capabilities forbid concurrency.
/// Wrap shared backends with this before fanning decode streams out.
pub struct Serialized<B> {
    inner: B,
    gate: Mutex<()>,
}

impl<B> Serialized<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            gate: Mutex::new(()),
        }
    }
}

impl<B: GenerationBackend> GenerationBackend for Serialized<B> {
    fn capabilities(&self) -> BackendCapabilities {
        self.inner.capabilities()
    }

    fn next_distribution(
        &self,
        prefix: &[TokenId],
        ctx: &ConditioningContext,
    ) -> Result<TokenDistribution, BackendError> {
        let _guard = self.gate.lock().unwrap();
        self.inner.next_distribution(prefix, ctx)
    }

    fn surface(&self, token: TokenId) -> Option<String> {
        self.inner.surface(token)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        self.inner.tokenize(text)
    }
}

impl<B: ScoringBackend> ScoringBackend for Serialized<B> {
    fn capabilities(&self) -> BackendCapabilities {
        self.inner.capabilities()
    }

    fn score_conditionals(
        &self,
        tokens: &[TokenId],
        prefix: &[TokenId],
        ctx: &ConditioningContext,
    ) -> Result<Vec<f64>, BackendError> {
        let _guard = self.gate.lock().unwrap();
        self.inner.score_conditionals(tokens, prefix, ctx)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        self.inner.tokenize(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_tokenizes_by_whitespace_and_drops_unknowns() {
        let vocab = Vocabulary::new(vec!["the".into(), "cat".into(), "sat".into()]);
        assert_eq!(
            vocab.tokenize("the cat sat"),
            vec![TokenId(0), TokenId(1), TokenId(2)]
        );
        assert_eq!(vocab.tokenize("the dog sat"), vec![TokenId(0), TokenId(2)]);
        assert_eq!(vocab.surface(TokenId(1)), Some("cat"));
        assert_eq!(vocab.surface(TokenId(9)), None);
        assert_eq!(vocab.id_of("sat"), Some(TokenId(2)));
    }

    struct OverlapProbe {
        in_flight: AtomicUsize,
        overlapped: AtomicUsize,
    }

    impl ScoringBackend for OverlapProbe {
        fn capabilities(&self) -> BackendCapabilities {
            BackendCapabilities {
                max_top_k: 16,
                concurrent: false,
                tokenizer_id: "probe".into(),
            }
        }

        fn score_conditionals(
            &self,
            tokens: &[TokenId],
            _prefix: &[TokenId],
            _ctx: &ConditioningContext,
        ) -> Result<Vec<f64>, BackendError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst);
            if now > 0 {
                self.overlapped.fetch_add(1, Ordering::SeqCst);
            }
            std::thread::sleep(std::time::Duration::from_millis(1));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            Ok(vec![0.5; tokens.len()])
        }

        fn tokenize(&self, _text: &str) -> Result<Vec<TokenId>, BackendError> {
            Ok(vec![])
        }
    }

    #[test]
    fn serialized_wrapper_prevents_overlapping_calls() {
        let probe = Serialized::new(OverlapProbe {
            in_flight: AtomicUsize::new(0),
            overlapped: AtomicUsize::new(0),
        });
        std::thread::scope(|scope| {
            for _ in 0..8 {
                scope.spawn(|| {
                    let ctx = ConditioningContext::default();
                    probe.score_conditionals(&[TokenId(0)], &[], &ctx).unwrap();
                });
            }
        });
        assert_eq!(probe.inner.overlapped.load(Ordering::SeqCst), 0);
    }
}
