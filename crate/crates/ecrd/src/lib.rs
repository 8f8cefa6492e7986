//! Evidence-constrained reweighting decoding (ECRD).
//!
//! A training-free, model-agnostic decoding engine that supervises each
//! token selection with a growing pool of textual evidence. Per step the
//! base model proposes a distribution; knee truncation keeps the plausible
//! candidates; evidence scoring builds a preference over them; a
//! mass-matched mixture negotiates between evidence and base probabilities;
//! and when the negotiated margin stays tight on an ambiguous knee, an
//! external decider commits the token and contributes one new evidence
//! sentence for every later step.
//!
//! The crate is organized along that pipeline:
//!
//! - [`dist`]: token distributions, sorting, knee truncation
//! - [`evidence`]: the pool, prefix-conditional caching, pooled scoring,
//!   and the min-over-prefix description baseline
//! - [`supervisor`]: mass matching, the negotiated mixture, the trigger
//! - [`backend`]: generation/scoring backends (tabular and remote)
//! - [`decider`]: the decider interface, scripted and remote
//! - [`engine`]: the decode loop, step records, frozen-trace replay
//! - [`trace`]: JSONL trace persistence
//! - [`analysis`]: latency-model fitting and threshold sweeps

pub mod analysis;
pub mod backend;
pub mod decider;
pub mod dist;
pub mod engine;
pub mod evidence;
pub mod supervisor;
pub mod trace;

pub use analysis::{
    fit_latency_model, latency_observations, load_corpus, sweep_frozen, sweep_live, AnalysisError,
    CorpusItem, LatencyModel, SweepBindings, SweepReport, SweepRow, DEFAULT_DELTA_GRID,
};
pub use backend::{
    BackendCapabilities, BackendError, ConditioningContext, GenerationBackend, RemoteConfig,
    RemoteModelClient, ScoringBackend, TabularModel, Vocabulary,
};
pub use decider::{
    CandidateSurface, Decider, DeciderError, DeciderRequest, DeciderVerdict, RemoteDecider,
    ScriptedDecider, ScriptedVerdict,
};
pub use dist::{
    knee_truncate, sort_descending, CandidateSet, DistError, TokenDistribution, TokenId,
};
pub use engine::{
    decode, replay, Backends, DecodeConfig, DecodeMode, DecodeTrace, EngineError, GainTag,
    GlobalDescription, ReplayReport, StepRecord, Totals,
};
pub use evidence::{
    CachePrecision, Evidence, EvidenceDistribution, EvidenceError, EvidencePool, EvidenceScorer,
    PoolSnapshot, PrefixSupportCache, Provenance, RegionAnnotation,
};
pub use supervisor::{
    decide_trigger, decide_trigger_parts, mass_match, negotiate, HoldReason, MassMatched,
    MixtureOutcome, TriggerDecision,
};
