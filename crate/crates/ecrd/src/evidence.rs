//! The dynamic evidence pool and evidence-conditioned scoring.
//!
//! Each evidence is one natural-language sentence. A candidate token's
//! support under one evidence is the mean of its conditional probability
//! over the sentence's prefixes (the empty prefix included), and supports
//! are averaged across the pool. The resulting preference is restricted to
//! the candidate set and normalized to form the evidence-induced
//! distribution.
//!
//! Conditionals are fetched once per (evidence, prefix, token) from the
//! scoring backend and cached; the cache is keyed only by evidence id,
//! prefix length, and token id, never by decode step, so it stays warm
//! across steps.
//!
//! Region annotations attached to an evidence are persisted for
//! interpretability but never participate in any scoring computation.

use std::collections::HashMap;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ConditioningContext, ScoringBackend};
use crate::dist::{CandidateSet, TokenId};

/// Pooled supports below this are treated as zero when forming the
/// evidence-induced distribution.
pub const ZERO_SUPPORT_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum EvidenceError {
    #[error("empty evidence pool")]
    EmptyPool,
    #[error("duplicate evidence id {0:?}")]
    DuplicateEvidenceId(String),
    #[error("evidence {id:?} tokenizes to an empty sequence")]
    EmptyTokenization { id: String },
    #[error("invalid region annotation: {0}")]
    InvalidAnnotation(String),
    #[error("scoring failed for evidence {evidence_id:?} at prefix length {prefix_len}: {source}")]
    Scoring {
        evidence_id: String,
        prefix_len: usize,
        #[source]
        source: BackendError,
    },
}

/// Where an evidence sentence came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    /// The global description the pool is initialized with.
    GlobalDescription,
    /// Emitted by the decider at the given decode step.
    Decider { step: usize },
}

/// An image region bound to an evidence sentence, pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub bbox: [f64; 4],
    pub label: Option<String>,
}

impl RegionAnnotation {
    pub fn validate(&self) -> Result<(), EvidenceError> {
        let [x0, y0, x1, y1] = self.bbox;
        if x0 < 0.0 || y0 < 0.0 {
            return Err(EvidenceError::InvalidAnnotation(format!(
                "negative coordinates in {:?}",
                self.bbox
            )));
        }
        if x0 > x1 || y0 > y1 {
            return Err(EvidenceError::InvalidAnnotation(format!(
                "inverted box {:?}",
                self.bbox
            )));
        }
        Ok(())
    }
}

/// One textual evidence sentence, tokenized under the scoring backend's
/// tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    id: String,
    text: String,
    tokens: Vec<TokenId>,
    annotations: Vec<RegionAnnotation>,
    provenance: Provenance,
}

impl Evidence {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        provenance: Provenance,
        annotations: Vec<RegionAnnotation>,
        backend: &dyn ScoringBackend,
    ) -> Result<Self, EvidenceError> {
        let id = id.into();
        let text = text.into();
        let tokens = backend
            .tokenize(&text)
            .map_err(|source| EvidenceError::Scoring {
                evidence_id: id.clone(),
                prefix_len: 0,
                source,
            })?;
        if tokens.is_empty() {
            return Err(EvidenceError::EmptyTokenization { id });
        }
        for annotation in &annotations {
            annotation.validate()?;
        }
        Ok(Self {
            id,
            text,
            tokens,
            annotations,
            provenance,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Tokenized form; its length is the number of scored prefixes.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn annotations(&self) -> &[RegionAnnotation] {
        &self.annotations
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }
}

/// Append-only ordered pool of evidence sentences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvidencePool {
    evidences: Vec<Evidence>,
}

impl EvidencePool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one evidence; ids must be unique within the pool.
    pub fn append(&mut self, evidence: Evidence) -> Result<(), EvidenceError> {
        if self.evidences.iter().any(|e| e.id == evidence.id) {
            return Err(EvidenceError::DuplicateEvidenceId(evidence.id));
        }
        self.evidences.push(evidence);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.evidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.evidences.is_empty()
    }

    pub fn evidences(&self) -> &[Evidence] {
        &self.evidences
    }

    pub fn snapshot(&self) -> PoolSnapshot {
        PoolSnapshot {
            evidences: self
                .evidences
                .iter()
                .map(|e| EvidenceSnapshot {
                    id: e.id.clone(),
                    text: e.text.clone(),
                    provenance: e.provenance.clone(),
                    annotations: e.annotations.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds a pool from its persisted form, re-deriving token sequences
    /// under the given scoring backend.
    pub fn from_snapshot(
        snapshot: &PoolSnapshot,
        backend: &dyn ScoringBackend,
    ) -> Result<Self, EvidenceError> {
        let mut pool = Self::new();
        for e in &snapshot.evidences {
            pool.append(Evidence::new(
                e.id.clone(),
                e.text.clone(),
                e.provenance.clone(),
                e.annotations.clone(),
                backend,
            )?)?;
        }
        Ok(pool)
    }
}

/// Persistence schema for an evidence pool. Token sequences are derived
/// state and deliberately absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSnapshot {
    pub evidences: Vec<EvidenceSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSnapshot {
    pub id: String,
    pub text: String,
    pub provenance: Provenance,
    pub annotations: Vec<RegionAnnotation>,
}

/// Storage precision for cached conditionals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CachePrecision {
    /// Full f64 storage.
    #[default]
    Full,
    /// Single-precision storage; round trip stays within 1e-3 absolute.
    Reduced,
}

/// Conditional-probability cache keyed by (evidence id, prefix length,
/// token id). Safe for concurrent read/insert; double-inserting the same
/// key is idempotent.
pub struct PrefixSupportCache {
    map: RwLock<HashMap<(String, usize, TokenId), f64>>,
    precision: CachePrecision,
}

impl PrefixSupportCache {
    pub fn new(precision: CachePrecision) -> Self {
        Self {
            map: RwLock::new(HashMap::new()),
            precision,
        }
    }

    pub fn get(&self, evidence_id: &str, prefix_len: usize, token: TokenId) -> Option<f64> {
        self.map
            .read()
            .unwrap()
            .get(&(evidence_id.to_string(), prefix_len, token))
            .copied()
    }

    pub fn insert(&self, evidence_id: &str, prefix_len: usize, token: TokenId, value: f64) {
        let stored = match self.precision {
            CachePrecision::Full => value,
            CachePrecision::Reduced => value as f32 as f64,
        };
        self.map
            .write()
            .unwrap()
            .insert((evidence_id.to_string(), prefix_len, token), stored);
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Text template wrapped around evidence prefixes before scoring.
/// `{prefix}` marks where the evidence tokens go; the default (empty)
/// template scores raw prefixes.
#[derive(Debug, Clone, Default)]
struct CompiledTemplate {
    prefix: Vec<TokenId>,
    suffix: Vec<TokenId>,
}

impl CompiledTemplate {
    fn compile(template: &str, backend: &dyn ScoringBackend) -> Result<Self, BackendError> {
        if template.is_empty() {
            return Ok(Self::default());
        }
        let (before, after) = match template.split_once("{prefix}") {
            Some((b, a)) => (b, a),
            None => (template, ""),
        };
        Ok(Self {
            prefix: backend.tokenize(before)?,
            suffix: backend.tokenize(after)?,
        })
    }
}

/// The evidence-induced preference over a candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceDistribution {
    /// Weights aligned with the candidate order, summing to 1.
    pub entries: Vec<(TokenId, f64)>,
    /// Pooled mean supports per candidate, same order.
    pub pooled_means: Vec<f64>,
    /// Set when every candidate's pooled support was below
    /// [`ZERO_SUPPORT_FLOOR`] and the distribution fell back to uniform.
    pub degenerate: bool,
}

impl EvidenceDistribution {
    pub fn weight(&self, token: TokenId) -> f64 {
        self.entries
            .iter()
            .find(|&&(t, _)| t == token)
            .map(|&(_, w)| w)
            .unwrap_or(0.0)
    }
}

/// Scores candidate tokens against an evidence pool through one scoring
/// backend, batching and caching per (evidence, prefix).
pub struct EvidenceScorer<'a> {
    backend: &'a dyn ScoringBackend,
    ctx: ConditioningContext,
    template: CompiledTemplate,
    cache: PrefixSupportCache,
}

impl<'a> EvidenceScorer<'a> {
    pub fn new(
        backend: &'a dyn ScoringBackend,
        ctx: ConditioningContext,
        template: &str,
        precision: CachePrecision,
    ) -> Result<Self, BackendError> {
        let template = CompiledTemplate::compile(template, backend)?;
        Ok(Self {
            backend,
            ctx,
            template,
            cache: PrefixSupportCache::new(precision),
        })
    }

    pub fn cache(&self) -> &PrefixSupportCache {
        &self.cache
    }

    /// Conditional probabilities of `tokens` under evidence prefix `j`
    /// (the first `j - 1` evidence tokens), cache-first.
    fn conditionals(
        &self,
        tokens: &[TokenId],
        evidence: &Evidence,
        j: usize,
    ) -> Result<Vec<f64>, EvidenceError> {
        let mut values = vec![0.0; tokens.len()];
        let mut missing = Vec::new();
        for (i, &token) in tokens.iter().enumerate() {
            match self.cache.get(evidence.id(), j, token) {
                Some(v) => values[i] = v,
                None => missing.push(i),
            }
        }
        if !missing.is_empty() {
            let mut context = self.template.prefix.clone();
            context.extend_from_slice(&evidence.tokens()[..j - 1]);
            context.extend_from_slice(&self.template.suffix);
            let query: Vec<TokenId> = missing.iter().map(|&i| tokens[i]).collect();
            let fresh = self
                .backend
                .score_conditionals(&query, &context, &self.ctx)
                .map_err(|source| EvidenceError::Scoring {
                    evidence_id: evidence.id().to_string(),
                    prefix_len: j,
                    source,
                })?;
            for (&i, &value) in missing.iter().zip(fresh.iter()) {
                self.cache.insert(evidence.id(), j, tokens[i], value);
                // Read back so reduced-precision storage affects the result
                // consistently between cold and warm paths.
                values[i] = self.cache.get(evidence.id(), j, tokens[i]).unwrap_or(value);
            }
        }
        Ok(values)
    }

    /// Mean-over-prefix support of one token under one evidence:
    /// the average of `p(w | e_<j)` for `j = 1..=L`, where `e_<1` is the
    /// empty prefix.
    pub fn prefix_mean_support(
        &self,
        token: TokenId,
        evidence: &Evidence,
    ) -> Result<f64, EvidenceError> {
        Ok(self.prefix_mean_supports(&[token], evidence)?[0])
    }

    /// Batched mean-over-prefix supports, one backend round trip per
    /// (evidence, prefix) for tokens not already cached.
    pub fn prefix_mean_supports(
        &self,
        tokens: &[TokenId],
        evidence: &Evidence,
    ) -> Result<Vec<f64>, EvidenceError> {
        let len = evidence.tokens().len();
        let mut sums = vec![0.0; tokens.len()];
        for j in 1..=len {
            let conditionals = self.conditionals(tokens, evidence, j)?;
            for (sum, value) in sums.iter_mut().zip(conditionals) {
                *sum += value;
            }
        }
        Ok(sums.into_iter().map(|s| s / len as f64).collect())
    }

    /// Pooled mean support of one token: the average of its
    /// mean-over-prefix supports across the pool.
    pub fn pooled_mean(&self, token: TokenId, pool: &EvidencePool) -> Result<f64, EvidenceError> {
        if pool.is_empty() {
            return Err(EvidenceError::EmptyPool);
        }
        let mut sum = 0.0;
        for evidence in pool.evidences() {
            sum += self.prefix_mean_support(token, evidence)?;
        }
        Ok(sum / pool.len() as f64)
    }

    /// Evidence score `S(w) = -log(pooled mean)`; positive infinity when
    /// every evidence gives the token zero support.
    pub fn pooled_score(&self, token: TokenId, pool: &EvidencePool) -> Result<f64, EvidenceError> {
        let mean = self.pooled_mean(token, pool)?;
        if mean <= 0.0 {
            return Ok(f64::INFINITY);
        }
        Ok(-mean.ln())
    }

    /// The evidence-induced distribution over the candidate set.
    ///
    /// Weights are proportional to pooled mean supports, which is
    /// numerically identical to softmaxing the negated scores. When every
    /// candidate's support is below [`ZERO_SUPPORT_FLOOR`] the distribution
    /// falls back to uniform and is flagged degenerate.
    pub fn evidence_distribution(
        &self,
        candidates: &CandidateSet,
        pool: &EvidencePool,
    ) -> Result<EvidenceDistribution, EvidenceError> {
        if pool.is_empty() {
            return Err(EvidenceError::EmptyPool);
        }
        let tokens: Vec<TokenId> = candidates.tokens().collect();
        let mut sums = vec![0.0; tokens.len()];
        for evidence in pool.evidences() {
            let supports = self.prefix_mean_supports(&tokens, evidence)?;
            for (sum, support) in sums.iter_mut().zip(supports) {
                *sum += support;
            }
        }
        let means: Vec<f64> = sums.iter().map(|s| s / pool.len() as f64).collect();

        let max_mean = means.iter().cloned().fold(0.0, f64::max);
        if max_mean < ZERO_SUPPORT_FLOOR {
            let uniform = 1.0 / tokens.len() as f64;
            return Ok(EvidenceDistribution {
                entries: tokens.into_iter().map(|t| (t, uniform)).collect(),
                pooled_means: means,
                degenerate: true,
            });
        }
        let total: f64 = means.iter().sum();
        Ok(EvidenceDistribution {
            entries: tokens
                .into_iter()
                .zip(means.iter().map(|m| m / total))
                .collect(),
            pooled_means: means,
            degenerate: false,
        })
    }

    /// Min-over-prefix description score: `min_j -log p(w | d_<j)`.
    ///
    /// This is the one-shot description-grounded baseline preference; the
    /// baseline decode mode replaces candidate logits with the negated
    /// scores before softmax.
    pub fn vdgd_min_kl(&self, token: TokenId, desc: &Evidence) -> Result<f64, EvidenceError> {
        let mut best = f64::INFINITY;
        for j in 1..=desc.tokens().len() {
            let p = self.conditionals(&[token], desc, j)?[0];
            let kl = if p <= 0.0 { f64::INFINITY } else { -p.ln() };
            if kl < best {
                best = kl;
            }
        }
        Ok(best)
    }
}
