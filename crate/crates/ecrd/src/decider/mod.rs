//! The visual decider interface, invoked when a step's trigger fires.
//!
//! A decider receives the image/session handle, the tail of the decoded
//! prefix, and the candidate tokens. The request type has no field capable
//! of carrying the original question, so question exclusion holds by
//! construction: the decider resolves the current step alone. It answers
//! with one chosen candidate and a single human-readable evidence sentence,
//! optionally bound to image regions.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backend::BackendError;
use crate::dist::{CandidateSet, TokenId};
use crate::evidence::RegionAnnotation;

pub mod remote;

pub use remote::RemoteDecider;

#[derive(Debug, thiserror::Error)]
pub enum DeciderError {
    #[error("scripted decider exhausted after {calls} calls")]
    ScriptExhausted { calls: usize },
    #[error("decider request has no candidates")]
    EmptyCandidates,
    #[error("invalid verdict: {reason}")]
    InvalidVerdict { reason: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// One candidate offered to the decider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSurface {
    pub id: TokenId,
    pub surface: String,
}

/// What the decider sees: context handle, prefix tail, candidates.
/// Deliberately nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeciderRequest {
    pub context_id: Option<String>,
    pub prefix_tail: Vec<String>,
    pub candidates: Vec<CandidateSurface>,
}

impl DeciderRequest {
    /// Builds a request carrying the last `min(tail_len, len)` prefix
    /// surfaces and the candidate surfaces.
    pub fn from_parts(
        context_id: Option<String>,
        prefix_surfaces: &[String],
        tail_len: usize,
        candidates: &CandidateSet,
        surface_of: impl Fn(TokenId) -> String,
    ) -> Self {
        let start = prefix_surfaces.len().saturating_sub(tail_len);
        Self {
            context_id,
            prefix_tail: prefix_surfaces[start..].to_vec(),
            candidates: candidates
                .tokens()
                .map(|id| CandidateSurface {
                    id,
                    surface: surface_of(id),
                })
                .collect(),
        }
    }
}

/// The decider's answer: a committed candidate plus one evidence sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct DeciderVerdict {
    pub chosen: TokenId,
    pub sentence: String,
    pub annotations: Vec<RegionAnnotation>,
    /// Wall-clock time of the call, measured by the caller side.
    pub latency: Duration,
}

impl DeciderVerdict {
    /// Checks the verdict invariants against the originating request.
    pub fn validate(&self, request: &DeciderRequest) -> Result<(), DeciderError> {
        if self.sentence.trim().is_empty() {
            return Err(DeciderError::InvalidVerdict {
                reason: "empty evidence sentence".into(),
            });
        }
        if !request.candidates.iter().any(|c| c.id == self.chosen) {
            return Err(DeciderError::InvalidVerdict {
                reason: format!("chosen token {} is not a candidate", self.chosen),
            });
        }
        for annotation in &self.annotations {
            annotation
                .validate()
                .map_err(|e| DeciderError::InvalidVerdict {
                    reason: e.to_string(),
                })?;
        }
        Ok(())
    }
}

pub trait Decider: Send + Sync {
    fn decide(&self, request: &DeciderRequest) -> Result<DeciderVerdict, DeciderError>;
}

/// Scripted entry consumed by [`ScriptedDecider`], one per call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedVerdict {
    pub chosen_id: u32,
    pub sentence: String,
    #[serde(default)]
    pub annotations: Vec<RegionAnnotation>,
}

/// Test double yielding a fixed sequence of verdicts.
pub struct ScriptedDecider {
    script: Mutex<VecDeque<ScriptedVerdict>>,
    total: usize,
}

impl ScriptedDecider {
    pub fn new(verdicts: Vec<ScriptedVerdict>) -> Self {
        Self {
            total: verdicts.len(),
            script: Mutex::new(verdicts.into()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, DeciderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidModel(format!("{}: {e}", path.display())))?;
        let verdicts: Vec<ScriptedVerdict> = serde_json::from_str(&text)
            .map_err(|e| BackendError::InvalidModel(format!("{}: {e}", path.display())))?;
        Ok(Self::new(verdicts))
    }

    /// Verdicts not yet consumed.
    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap().len()
    }
}

impl Decider for ScriptedDecider {
    fn decide(&self, request: &DeciderRequest) -> Result<DeciderVerdict, DeciderError> {
        if request.candidates.is_empty() {
            return Err(DeciderError::EmptyCandidates);
        }
        let start = std::time::Instant::now();
        let next = self.script.lock().unwrap().pop_front();
        match next {
            Some(v) => Ok(DeciderVerdict {
                chosen: TokenId(v.chosen_id),
                sentence: v.sentence,
                annotations: v.annotations,
                latency: start.elapsed(),
            }),
            None => Err(DeciderError::ScriptExhausted { calls: self.total }),
        }
    }
}
