//! The decode loop: initialize the evidence pool with a global description,
//! then per step run base distribution, knee truncation, evidence scoring,
//! negotiation, and the trigger test; commit a token; record everything.
//!
//! Four modes share the loop. `base_greedy` commits the base argmax.
//! `vdgd_baseline` replaces candidate logits with min-over-prefix
//! description scores and commits the resulting argmax. `supervisor_only`
//! runs the full reweighting pipeline with triggers disabled. `ecrd` adds
//! decider calls on fired triggers: the verdict's token is forced at that
//! step (bypassing the mixture) and its sentence joins the pool for all
//! later steps.
//!
//! Backend or decider failures abort the decode; the partial trace is
//! returned with `aborted` set rather than discarded.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ConditioningContext, GenerationBackend, ScoringBackend};
use crate::decider::{Decider, DeciderError, DeciderRequest};
use crate::dist::{knee_truncate, sort_descending, CandidateSet, TokenId};
use crate::evidence::{
    CachePrecision, Evidence, EvidenceError, EvidencePool, EvidenceScorer, PoolSnapshot, Provenance,
};
use crate::supervisor::{
    decide_trigger_parts, mass_match, negotiate, MixtureOutcome, TriggerDecision,
};

/// Instruction used when the global description is backend-generated.
const CAPTION_INSTRUCTION: &str = "Describe the image.";
/// Token budget for a backend-generated global description.
const CAPTION_MAX_TOKENS: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("delta {0} outside [0, 1]")]
    InvalidDelta(f64),
    #[error("max_tokens must be at least 1")]
    InvalidMaxTokens,
    #[error("mode {0:?} requires a scoring backend")]
    MissingScoringBackend(DecodeMode),
    #[error("mode ecrd requires a decider")]
    MissingDecider,
    #[error("scoring template failed to compile: {0}")]
    Template(#[from] BackendError),
    #[error("replay: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Ecrd,
    VdgdBaseline,
    BaseGreedy,
    SupervisorOnly,
}

impl DecodeMode {
    fn needs_scoring(self) -> bool {
        !matches!(self, DecodeMode::BaseGreedy)
    }

    fn triggers_enabled(self) -> bool {
        matches!(self, DecodeMode::Ecrd)
    }
}

/// Where the pool's initial global description comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
#[derive(Default)]
pub enum GlobalDescription {
    Provided {
        text: String,
    },
    #[default]
    BackendGenerated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    #[serde(default)]
    pub mode: DecodeMode,
    /// Uncertainty threshold for the trigger rule.
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub stop_tokens: Vec<TokenId>,
    /// Number of prefix tokens shown to the decider.
    #[serde(default = "default_tail_len")]
    pub tail_len: usize,
    /// Text template wrapped around evidence prefixes when scoring;
    /// `{prefix}` marks the insertion point; empty means raw prefixes.
    #[serde(default)]
    pub scoring_template: String,
    #[serde(default)]
    pub global_description: GlobalDescription,
    #[serde(default)]
    pub cache_precision: CachePrecision,
    /// When false, all wall-clock fields are written as zero so repeated
    /// runs produce byte-identical traces.
    #[serde(default = "default_true")]
    pub record_timings: bool,
    /// Descriptors echoed into the trace header for provenance.
    #[serde(default)]
    pub backend_descriptor: String,
    #[serde(default)]
    pub scoring_descriptor: String,
    #[serde(default)]
    pub decider_descriptor: String,
}

pub fn default_delta() -> f64 {
    0.08
}

fn default_max_tokens() -> usize {
    256
}

fn default_tail_len() -> usize {
    64
}

fn default_true() -> bool {
    true
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::default(),
            delta: default_delta(),
            max_tokens: default_max_tokens(),
            stop_tokens: Vec::new(),
            tail_len: default_tail_len(),
            scoring_template: String::new(),
            global_description: GlobalDescription::default(),
            cache_precision: CachePrecision::default(),
            record_timings: true,
            backend_descriptor: String::new(),
            scoring_descriptor: String::new(),
            decider_descriptor: String::new(),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(0.0..=1.0).contains(&self.delta) || self.delta.is_nan() {
            return Err(EngineError::InvalidDelta(self.delta));
        }
        if self.max_tokens == 0 {
            return Err(EngineError::InvalidMaxTokens);
        }
        Ok(())
    }
}

/// Backend and decider bindings for one decode stream.
pub struct Backends<'a> {
    pub generation: &'a dyn GenerationBackend,
    pub scoring: Option<&'a dyn ScoringBackend>,
    pub decider: Option<&'a dyn Decider>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub id: TokenId,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommittedToken {
    pub id: TokenId,
    pub surface: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct StepTimings {
    pub base_ms: f64,
    pub scoring_ms: f64,
    pub decider_ms: f64,
}

/// Analyst annotation mirroring the gain-attribution categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GainTag {
    #[default]
    None,
    DeciderDirectAnswer,
    DeciderMidchainGrounding,
    SupervisorReweight,
}

/// Full audit record for one decoding step.
///
/// `pooled_means`, `r`, and `r_tilde` are aligned with the candidate set,
/// i.e. the first `knee_index` entries of `base_top_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub base_top_k: Vec<TokenProb>,
    pub knee_index: usize,
    pub covered_mass: f64,
    pub pooled_means: Vec<f64>,
    pub r: Vec<f64>,
    pub r_tilde: Vec<f64>,
    pub alpha: f64,
    pub p_mix_top_k: Vec<TokenProb>,
    pub raw_mass: f64,
    pub margin: f64,
    pub trigger: TriggerDecision,
    pub decider_verdict_id: Option<String>,
    pub committed: CommittedToken,
    pub timings: StepTimings,
    pub gain_tag: GainTag,
    pub zero_support_fallback: bool,
    pub verdict_violation: bool,
    pub violation_detail: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Totals {
    pub tokens: usize,
    pub decider_calls: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub config: DecodeConfig,
    pub steps: Vec<StepRecord>,
    pub final_text: String,
    pub pool: PoolSnapshot,
    pub totals: Totals,
    pub aborted: Option<String>,
}

impl DecodeTrace {
    /// Attaches a gain-attribution tag to one step.
    pub fn tag_step(&mut self, step_index: usize, tag: GainTag) -> Result<(), EngineError> {
        let step = self
            .steps
            .get_mut(step_index)
            .ok_or_else(|| EngineError::Replay(format!("no step {step_index}")))?;
        step.gain_tag = tag;
        Ok(())
    }
}

struct StepOutcome {
    record: StepRecord,
    committed: TokenId,
}

/// Runs one decode stream to completion (stop token, token budget, or
/// abort). See the module docs for per-mode behavior.
pub fn decode(
    prompt: &[TokenId],
    ctx: &ConditioningContext,
    cfg: &DecodeConfig,
    backends: &Backends<'_>,
) -> Result<DecodeTrace, EngineError> {
    cfg.validate()?;
    if cfg.mode.needs_scoring() && backends.scoring.is_none() {
        return Err(EngineError::MissingScoringBackend(cfg.mode));
    }
    if cfg.mode.triggers_enabled() && backends.decider.is_none() {
        return Err(EngineError::MissingDecider);
    }

    let run_start = Instant::now();
    let mut pool = EvidencePool::new();
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut aborted: Option<String> = None;
    let mut decider_calls = 0usize;

    let surface_of = |t: TokenId| {
        backends
            .generation
            .surface(t)
            .unwrap_or_else(|| format!("<{}>", t.0))
    };

    let scorer = match backends.scoring {
        Some(scoring) => Some(
            EvidenceScorer::new(
                scoring,
                ctx.clone(),
                &cfg.scoring_template,
                cfg.cache_precision,
            )
            .map_err(EngineError::Template)?,
        ),
        None => None,
    };

    // E_0: the global description joins the pool before step 0.
    if cfg.mode.needs_scoring() {
        let scoring = backends.scoring.expect("checked above");
        let description = match &cfg.global_description {
            GlobalDescription::Provided { text } => Ok(text.clone()),
            GlobalDescription::BackendGenerated => {
                generate_caption(backends.generation, ctx, &cfg.stop_tokens, &surface_of)
            }
        };
        match description.and_then(|text| {
            Evidence::new(
                "global",
                text,
                Provenance::GlobalDescription,
                vec![],
                scoring,
            )
            .map_err(|e| format!("global description: {e}"))
        }) {
            Ok(evidence) => {
                if let Err(e) = pool.append(evidence) {
                    aborted = Some(format!("global description: {e}"));
                }
            }
            Err(message) => aborted = Some(message),
        }
    }

    let mut prefix: Vec<TokenId> = prompt.to_vec();
    let mut prefix_surfaces: Vec<String> = prompt.iter().map(|&t| surface_of(t)).collect();
    let mut committed_text: Vec<String> = Vec::new();

    while aborted.is_none() && steps.len() < cfg.max_tokens {
        let step_index = steps.len();
        let outcome = run_step(
            step_index,
            &prefix,
            &prefix_surfaces,
            ctx,
            cfg,
            backends,
            scorer.as_ref(),
            &mut pool,
            &mut decider_calls,
            &surface_of,
        );
        match outcome {
            Ok(step) => {
                let committed = step.committed;
                prefix.push(committed);
                let surface = step.record.committed.surface.clone();
                prefix_surfaces.push(surface.clone());
                let is_stop = cfg.stop_tokens.contains(&committed);
                if !is_stop {
                    committed_text.push(surface);
                }
                steps.push(step.record);
                if is_stop {
                    break;
                }
            }
            Err(message) => {
                aborted = Some(message);
            }
        }
    }

    let wall_time_s = if cfg.record_timings {
        run_start.elapsed().as_secs_f64()
    } else {
        0.0
    };
    Ok(DecodeTrace {
        config: cfg.clone(),
        totals: Totals {
            tokens: steps.len(),
            decider_calls,
            wall_time_s,
        },
        final_text: committed_text.join(" "),
        pool: pool.snapshot(),
        steps,
        aborted,
    })
}

fn elapsed_ms(start: Instant, record: bool) -> f64 {
    if record {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    step_index: usize,
    prefix: &[TokenId],
    prefix_surfaces: &[String],
    ctx: &ConditioningContext,
    cfg: &DecodeConfig,
    backends: &Backends<'_>,
    scorer: Option<&EvidenceScorer<'_>>,
    pool: &mut EvidencePool,
    decider_calls: &mut usize,
    surface_of: &dyn Fn(TokenId) -> String,
) -> Result<StepOutcome, String> {
    let base_start = Instant::now();
    let base = backends
        .generation
        .next_distribution(prefix, ctx)
        .map_err(|e| format!("generation backend at step {step_index}: {e}"))?;
    let base_ms = elapsed_ms(base_start, cfg.record_timings);

    let sorted = sort_descending(&base).map_err(|e| format!("step {step_index}: {e}"))?;
    let candidates = knee_truncate(&base).map_err(|e| format!("step {step_index}: {e}"))?;
    let base_top_k: Vec<TokenProb> = sorted.iter().map(|&(id, p)| TokenProb { id, p }).collect();
    let alpha = sorted[0].1;

    let mut timings = StepTimings {
        base_ms,
        ..StepTimings::default()
    };

    match cfg.mode {
        DecodeMode::BaseGreedy => {
            let committed = sorted[0].0;
            let margin = match sorted.get(1) {
                Some(&(_, p2)) => sorted[0].1 - p2,
                None => sorted[0].1,
            };
            let trigger = disarmed(decide_trigger_parts(
                candidates.knee_index(),
                margin,
                cfg.delta,
            ));
            Ok(StepOutcome {
                record: StepRecord {
                    step_index,
                    base_top_k: base_top_k.clone(),
                    knee_index: candidates.knee_index(),
                    covered_mass: candidates.covered_mass(),
                    pooled_means: vec![],
                    r: vec![],
                    r_tilde: vec![],
                    alpha,
                    p_mix_top_k: base_top_k,
                    raw_mass: 1.0,
                    margin,
                    trigger,
                    decider_verdict_id: None,
                    committed: CommittedToken {
                        id: committed,
                        surface: surface_of(committed),
                    },
                    timings,
                    gain_tag: GainTag::None,
                    zero_support_fallback: false,
                    verdict_violation: false,
                    violation_detail: None,
                },
                committed,
            })
        }
        DecodeMode::VdgdBaseline => {
            let scorer = scorer.expect("scoring backend checked at decode start");
            let description = &pool.evidences()[0];
            let scoring_start = Instant::now();
            // exp(-min_j -log p) is the max-over-prefix support; normalize
            // it over the candidate set.
            let mut supports = Vec::with_capacity(candidates.knee_index());
            for token in candidates.tokens() {
                let kl = scorer
                    .vdgd_min_kl(token, description)
                    .map_err(|e| format!("step {step_index}: {e}"))?;
                supports.push((-kl).exp());
            }
            timings.scoring_ms = elapsed_ms(scoring_start, cfg.record_timings);
            let total: f64 = supports.iter().sum();
            let degenerate = total < crate::evidence::ZERO_SUPPORT_FLOOR;
            let restricted: Vec<f64> = if degenerate {
                vec![1.0 / supports.len() as f64; supports.len()]
            } else {
                supports.iter().map(|s| s / total).collect()
            };
            let mut ranked: Vec<TokenProb> = candidates
                .tokens()
                .zip(restricted.iter())
                .map(|(id, &p)| TokenProb { id, p })
                .collect();
            ranked.sort_by(|a, b| b.p.total_cmp(&a.p).then(a.id.cmp(&b.id)));
            let committed = ranked[0].id;
            let margin = match ranked.get(1) {
                Some(second) => ranked[0].p - second.p,
                None => ranked[0].p,
            };
            let trigger = disarmed(decide_trigger_parts(
                candidates.knee_index(),
                margin,
                cfg.delta,
            ));
            Ok(StepOutcome {
                record: StepRecord {
                    step_index,
                    base_top_k,
                    knee_index: candidates.knee_index(),
                    covered_mass: candidates.covered_mass(),
                    pooled_means: vec![],
                    r: restricted,
                    r_tilde: vec![],
                    alpha,
                    p_mix_top_k: ranked,
                    raw_mass: 1.0,
                    margin,
                    trigger,
                    decider_verdict_id: None,
                    committed: CommittedToken {
                        id: committed,
                        surface: surface_of(committed),
                    },
                    timings,
                    gain_tag: GainTag::None,
                    zero_support_fallback: degenerate,
                    verdict_violation: false,
                    violation_detail: None,
                },
                committed,
            })
        }
        DecodeMode::Ecrd | DecodeMode::SupervisorOnly => {
            let scorer = scorer.expect("scoring backend checked at decode start");
            let scoring_start = Instant::now();
            let evidence_dist = scorer
                .evidence_distribution(&candidates, pool)
                .map_err(|e| format!("step {step_index}: {e}"))?;
            let matched = mass_match(&evidence_dist, &candidates)
                .map_err(|e| format!("step {step_index}: {e}"))?;
            let outcome = negotiate(&base, &matched, &candidates)
                .map_err(|e| format!("step {step_index}: {e}"))?;
            timings.scoring_ms = elapsed_ms(scoring_start, cfg.record_timings);

            let decision = decide_trigger_parts(candidates.knee_index(), outcome.margin, cfg.delta);
            let (trigger, fired) = if cfg.mode.triggers_enabled() {
                (decision, decision.fired)
            } else {
                (disarmed(decision), false)
            };

            let mut decider_verdict_id = None;
            let mut verdict_violation = false;
            let mut violation_detail = None;
            let committed;
            if fired {
                let decider = backends.decider.expect("decider checked at decode start");
                let request = DeciderRequest::from_parts(
                    ctx.context_id.clone(),
                    prefix_surfaces,
                    cfg.tail_len,
                    &candidates,
                    surface_of,
                );
                let decider_start = Instant::now();
                let result = decider.decide(&request);
                timings.decider_ms = elapsed_ms(decider_start, cfg.record_timings);
                match result {
                    Ok(verdict) => {
                        if let Err(e) = verdict.validate(&request) {
                            // Fail open: keep decoding on the mixture argmax
                            // and record the violation.
                            verdict_violation = true;
                            violation_detail = Some(e.to_string());
                            committed = outcome.top1.0;
                        } else {
                            committed = verdict.chosen;
                            let evidence_id = format!("decider-step-{step_index}");
                            let scoring = backends.scoring.expect("checked at decode start");
                            match Evidence::new(
                                evidence_id.clone(),
                                verdict.sentence.clone(),
                                Provenance::Decider { step: step_index },
                                verdict.annotations.clone(),
                                scoring,
                            ) {
                                Ok(evidence) => match pool.append(evidence) {
                                    Ok(()) => {
                                        // Counted only on full success so the
                                        // total equals pool growth from
                                        // decider provenance.
                                        *decider_calls += 1;
                                        decider_verdict_id = Some(evidence_id);
                                    }
                                    Err(e) => return Err(format!("step {step_index}: {e}")),
                                },
                                Err(EvidenceError::EmptyTokenization { id }) => {
                                    verdict_violation = true;
                                    violation_detail = Some(format!(
                                        "verdict sentence for {id} tokenizes to nothing; not pooled"
                                    ));
                                }
                                Err(e) => return Err(format!("step {step_index}: {e}")),
                            }
                        }
                    }
                    Err(DeciderError::InvalidVerdict { reason }) => {
                        verdict_violation = true;
                        violation_detail = Some(reason);
                        committed = outcome.top1.0;
                    }
                    Err(e) => return Err(format!("decider at step {step_index}: {e}")),
                }
            } else {
                committed = outcome.top1.0;
            }

            let record = build_supervised_record(
                step_index,
                base_top_k,
                &candidates,
                &evidence_dist.pooled_means,
                evidence_dist.entries.iter().map(|&(_, w)| w).collect(),
                matched.entries().iter().map(|&(_, w)| w).collect(),
                &outcome,
                trigger,
                decider_verdict_id,
                CommittedToken {
                    id: committed,
                    surface: surface_of(committed),
                },
                timings,
                evidence_dist.degenerate,
                verdict_violation,
                violation_detail,
            );
            Ok(StepOutcome { record, committed })
        }
    }
}

fn disarmed(decision: TriggerDecision) -> TriggerDecision {
    TriggerDecision {
        fired: false,
        ..decision
    }
}

#[allow(clippy::too_many_arguments)]
fn build_supervised_record(
    step_index: usize,
    base_top_k: Vec<TokenProb>,
    candidates: &CandidateSet,
    pooled_means: &[f64],
    r: Vec<f64>,
    r_tilde: Vec<f64>,
    outcome: &MixtureOutcome,
    trigger: TriggerDecision,
    decider_verdict_id: Option<String>,
    committed: CommittedToken,
    timings: StepTimings,
    zero_support_fallback: bool,
    verdict_violation: bool,
    violation_detail: Option<String>,
) -> StepRecord {
    let ranked = sort_descending(&outcome.p_mix).expect("mixture cannot be empty");
    StepRecord {
        step_index,
        base_top_k,
        knee_index: candidates.knee_index(),
        covered_mass: candidates.covered_mass(),
        pooled_means: pooled_means.to_vec(),
        r,
        r_tilde,
        alpha: outcome.alpha,
        p_mix_top_k: ranked.iter().map(|&(id, p)| TokenProb { id, p }).collect(),
        raw_mass: outcome.raw_mass,
        margin: outcome.margin,
        trigger,
        decider_verdict_id,
        committed,
        timings,
        gain_tag: GainTag::None,
        zero_support_fallback,
        verdict_violation,
        violation_detail,
    }
}

fn generate_caption(
    generation: &dyn GenerationBackend,
    ctx: &ConditioningContext,
    stop_tokens: &[TokenId],
    surface_of: &impl Fn(TokenId) -> String,
) -> Result<String, String> {
    let mut tokens = generation
        .tokenize(CAPTION_INSTRUCTION)
        .map_err(|e| format!("caption instruction: {e}"))?;
    let mut caption = Vec::new();
    for _ in 0..CAPTION_MAX_TOKENS {
        let dist = generation
            .next_distribution(&tokens, ctx)
            .map_err(|e| format!("caption generation: {e}"))?;
        let sorted = sort_descending(&dist).map_err(|e| format!("caption generation: {e}"))?;
        let top = sorted[0].0;
        if stop_tokens.contains(&top) {
            break;
        }
        tokens.push(top);
        caption.push(surface_of(top));
    }
    Ok(caption.join(" "))
}

/// Re-evaluates the trigger rule over a frozen trace's per-step
/// `(knee_index, margin)` pairs under a new threshold.
///
/// Replay never re-decodes: committed tokens and margins are those of the
/// original trajectory, so replayed counts answer "how often would the
/// trigger have fired", not "what would a live run at this threshold do".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub delta: f64,
    pub trigger_count: usize,
    pub steps: Vec<ReplayStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayStep {
    pub step_index: usize,
    pub knee_index: usize,
    pub margin: f64,
    pub fired: bool,
}

pub fn replay(trace: &DecodeTrace, new_delta: f64) -> Result<ReplayReport, EngineError> {
    if !(0.0..=1.0).contains(&new_delta) || new_delta.is_nan() {
        return Err(EngineError::InvalidDelta(new_delta));
    }
    let mut steps = Vec::with_capacity(trace.steps.len());
    for record in &trace.steps {
        if record.margin.is_nan() {
            return Err(EngineError::Replay(format!(
                "step {} has no usable margin",
                record.step_index
            )));
        }
        let fired = decide_trigger_parts(record.knee_index, record.margin, new_delta).fired;
        steps.push(ReplayStep {
            step_index: record.step_index,
            knee_index: record.knee_index,
            margin: record.margin,
            fired,
        });
    }
    Ok(ReplayReport {
        delta: new_delta,
        trigger_count: steps.iter().filter(|s| s.fired).count(),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::tabular::TabularModel;
    use crate::backend::Vocabulary;
    use crate::decider::{ScriptedDecider, ScriptedVerdict};

    fn chain_model() -> TabularModel {
        let vocab = Vocabulary::new(
            ["go", "a", "b", "c", "."]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        let mut m = TabularModel::with_uniform_default(vocab).unwrap();
        m.add_entry_surfaces(&["go"], &[("a", 1.0)]).unwrap();
        m.add_entry_surfaces(&["a"], &[("b", 1.0)]).unwrap();
        m.add_entry_surfaces(&["b"], &[("c", 1.0)]).unwrap();
        m.add_entry_surfaces(&["c"], &[(".", 1.0)]).unwrap();
        m
    }

    fn cfg(mode: DecodeMode) -> DecodeConfig {
        DecodeConfig {
            mode,
            global_description: GlobalDescription::Provided { text: "a b".into() },
            stop_tokens: vec![TokenId(4)],
            max_tokens: 16,
            record_timings: false,
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn base_greedy_follows_the_argmax_chain() {
        let model = chain_model();
        let ctx = ConditioningContext::default();
        let backends = Backends {
            generation: &model,
            scoring: None,
            decider: None,
        };
        let prompt = model.vocab().tokenize("go");
        let trace = decode(&prompt, &ctx, &cfg(DecodeMode::BaseGreedy), &backends).unwrap();
        assert_eq!(trace.final_text, "a b c");
        assert_eq!(trace.totals.tokens, 4); // includes the stop step
        assert_eq!(trace.totals.decider_calls, 0);
        assert!(trace.aborted.is_none());
        assert!(trace.pool.evidences.is_empty());
    }

    #[test]
    fn one_hot_chain_is_identical_across_supervised_modes() {
        let model = chain_model();
        let ctx = ConditioningContext::default();
        let backends = Backends {
            generation: &model,
            scoring: Some(&model),
            decider: None,
        };
        let prompt = model.vocab().tokenize("go");
        let supervised =
            decode(&prompt, &ctx, &cfg(DecodeMode::SupervisorOnly), &backends).unwrap();
        // One-hot base gives alpha = 1 at each step: evidence is disabled.
        assert_eq!(supervised.final_text, "a b c");
        assert_eq!(supervised.pool.evidences.len(), 1);
    }

    #[test]
    fn mode_requirements_are_validated() {
        let model = chain_model();
        let ctx = ConditioningContext::default();
        let prompt = model.vocab().tokenize("go");
        let no_scoring = Backends {
            generation: &model,
            scoring: None,
            decider: None,
        };
        assert!(matches!(
            decode(&prompt, &ctx, &cfg(DecodeMode::SupervisorOnly), &no_scoring),
            Err(EngineError::MissingScoringBackend(_))
        ));
        let no_decider = Backends {
            generation: &model,
            scoring: Some(&model),
            decider: None,
        };
        assert!(matches!(
            decode(&prompt, &ctx, &cfg(DecodeMode::Ecrd), &no_decider),
            Err(EngineError::MissingDecider)
        ));
        let mut bad = cfg(DecodeMode::BaseGreedy);
        bad.delta = 1.5;
        assert!(matches!(
            decode(&prompt, &ctx, &bad, &no_scoring),
            Err(EngineError::InvalidDelta(_))
        ));
    }

    #[test]
    fn decider_exhaustion_aborts_with_partial_trace() {
        let vocab = Vocabulary::new(
            ["go", "x", "y", "."]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        let mut model = TabularModel::with_uniform_default(vocab).unwrap();
        // A near-tie step: knee keeps {x, y} and the margin is tiny.
        model
            .add_entry_surfaces(&["go"], &[("x", 0.48), ("y", 0.46), (".", 0.06)])
            .unwrap();
        let decider = ScriptedDecider::new(vec![]);
        let ctx = ConditioningContext::default();
        let backends = Backends {
            generation: &model,
            scoring: Some(&model),
            decider: Some(&decider),
        };
        let mut config = cfg(DecodeMode::Ecrd);
        config.global_description = GlobalDescription::Provided { text: "go".into() };
        config.stop_tokens = vec![TokenId(3)];
        let prompt = model.vocab().tokenize("go");
        let trace = decode(&prompt, &ctx, &config, &backends).unwrap();
        assert!(trace.aborted.as_deref().unwrap().contains("exhausted"));
        assert!(trace.steps.is_empty());
    }

    #[test]
    fn verdict_outside_candidates_falls_back_to_mixture_argmax() {
        let vocab = Vocabulary::new(
            ["go", "x", "y", "z", "."]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        let mut model = TabularModel::with_uniform_default(vocab).unwrap();
        model
            .add_entry_surfaces(&["go"], &[("x", 0.51), ("y", 0.46), ("z", 0.03)])
            .unwrap();
        model.add_entry_surfaces(&["x"], &[(".", 1.0)]).unwrap();
        model.add_entry_surfaces(&["y"], &[(".", 1.0)]).unwrap();
        // Chooses "z", which the knee never kept.
        let decider = ScriptedDecider::new(vec![ScriptedVerdict {
            chosen_id: 3,
            sentence: "a b".into(),
            annotations: vec![],
        }]);
        let ctx = ConditioningContext::default();
        let backends = Backends {
            generation: &model,
            scoring: Some(&model),
            decider: Some(&decider),
        };
        let mut config = cfg(DecodeMode::Ecrd);
        config.global_description = GlobalDescription::Provided { text: "go".into() };
        config.stop_tokens = vec![TokenId(4)];
        let prompt = model.vocab().tokenize("go");
        let trace = decode(&prompt, &ctx, &config, &backends).unwrap();
        assert!(trace.aborted.is_none());
        let step0 = &trace.steps[0];
        assert!(step0.trigger.fired);
        assert!(step0.verdict_violation);
        assert!(step0.decider_verdict_id.is_none());
        assert_eq!(trace.totals.decider_calls, 0);
        // Pool unchanged beyond the global description.
        assert_eq!(trace.pool.evidences.len(), 1);
        // Mixture argmax committed; uniform evidence keeps the base order.
        assert_eq!(step0.committed.surface, "x");
    }

    #[test]
    fn replay_applies_the_rule_to_frozen_margins() {
        let margins = [0.30, 0.02, 0.10];
        let knees = [1usize, 2, 2];
        let mut trace = DecodeTrace {
            config: DecodeConfig::default(),
            steps: vec![],
            final_text: String::new(),
            pool: PoolSnapshot { evidences: vec![] },
            totals: Totals::default(),
            aborted: None,
        };
        for (i, (&margin, &knee)) in margins.iter().zip(knees.iter()).enumerate() {
            trace.steps.push(StepRecord {
                step_index: i,
                base_top_k: vec![],
                knee_index: knee,
                covered_mass: 1.0,
                pooled_means: vec![],
                r: vec![],
                r_tilde: vec![],
                alpha: 0.5,
                p_mix_top_k: vec![],
                raw_mass: 1.0,
                margin,
                trigger: decide_trigger_parts(knee, margin, 0.08),
                decider_verdict_id: None,
                committed: CommittedToken {
                    id: TokenId(0),
                    surface: "t".into(),
                },
                timings: StepTimings::default(),
                gain_tag: GainTag::None,
                zero_support_fallback: false,
                verdict_violation: false,
                violation_detail: None,
            });
        }
        assert_eq!(replay(&trace, 0.08).unwrap().trigger_count, 1);
        assert_eq!(replay(&trace, 1.0).unwrap().trigger_count, 2);
        assert_eq!(replay(&trace, 0.0).unwrap().trigger_count, 0);
        assert!(matches!(
            replay(&trace, 1.5),
            Err(EngineError::InvalidDelta(_))
        ));
        let report = replay(&trace, 0.08).unwrap();
        assert!(!report.steps[0].fired);
        assert!(report.steps[1].fired);
        assert!(!report.steps[2].fired);
    }

    #[test]
    fn backend_generated_description_seeds_the_pool() {
        let vocab = Vocabulary::new(
            ["Describe", "the", "image.", "garden", "photo", "go", "."]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        let mut model = TabularModel::with_uniform_default(vocab).unwrap();
        m_entry(&mut model, &["image."], &[("garden", 1.0)]);
        m_entry(&mut model, &["garden"], &[("photo", 1.0)]);
        m_entry(&mut model, &["photo"], &[(".", 1.0)]);
        m_entry(&mut model, &["go"], &[("garden", 1.0)]);
        let ctx = ConditioningContext::default();
        let backends = Backends {
            generation: &model,
            scoring: Some(&model),
            decider: None,
        };
        let config = DecodeConfig {
            mode: DecodeMode::SupervisorOnly,
            global_description: GlobalDescription::BackendGenerated,
            stop_tokens: vec![model.vocab().id_of(".").unwrap()],
            max_tokens: 4,
            record_timings: false,
            ..DecodeConfig::default()
        };
        let prompt = model.vocab().tokenize("go");
        let trace = decode(&prompt, &ctx, &config, &backends).unwrap();
        assert!(trace.aborted.is_none());
        assert_eq!(trace.pool.evidences[0].text, "garden photo");
    }

    fn m_entry(model: &mut TabularModel, context: &[&str], probs: &[(&str, f64)]) {
        model.add_entry_surfaces(context, probs).unwrap();
    }
}
