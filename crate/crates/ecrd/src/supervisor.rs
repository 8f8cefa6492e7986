//! Mass-matched rescaling, the negotiated mixture, and the trigger rule.
//!
//! The evidence-induced distribution is normalized only over the candidate
//! set while the base distribution spreads over the full vocabulary, so the
//! two are not on the same scale. [`mass_match`] rescales the evidence
//! weights so their total on the candidate set equals the base mass there.
//! [`negotiate`] then mixes the two with the adaptive weight
//! `alpha = p_(1)`: confident steps keep the base distribution dominant,
//! diffuse steps hand weight to the evidence.
//!
//! The mixture as defined leaves total mass `m + alpha * (1 - m)` where `m`
//! is the covered mass, so the engine renormalizes the full-vocabulary
//! mixture and computes the margin on the renormalized distribution; the
//! raw mass is kept so the unnormalized margin stays recoverable. Rescaling
//! by a positive constant never changes the ranking, hence never the
//! committed token.

use serde::{Deserialize, Serialize};

use crate::dist::{CandidateSet, DistError, TokenDistribution, TokenId};
use crate::evidence::EvidenceDistribution;

/// The evidence distribution rescaled so its candidate-set mass matches the
/// base distribution's.
#[derive(Debug, Clone, PartialEq)]
pub struct MassMatched {
    entries: Vec<(TokenId, f64)>,
    total_mass: f64,
}

impl MassMatched {
    /// Weights aligned with the candidate order.
    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    /// Sum of weights; equals the candidate set's covered mass.
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn weight(&self, token: TokenId) -> f64 {
        self.entries
            .iter()
            .find(|&&(t, _)| t == token)
            .map(|&(_, w)| w)
            .unwrap_or(0.0)
    }
}

/// Rescales the evidence-induced distribution so that the total mass it
/// assigns to the candidate set equals the base mass covered there, without
/// changing relative weights.
pub fn mass_match(
    evidence: &EvidenceDistribution,
    candidates: &CandidateSet,
) -> Result<MassMatched, DistError> {
    let covered = candidates.covered_mass();
    if covered <= 0.0 {
        return Err(DistError::DegenerateCandidateMass);
    }
    let weight_sum: f64 = evidence.entries.iter().map(|&(_, w)| w).sum();
    let scale = covered / weight_sum;
    let entries: Vec<(TokenId, f64)> = evidence
        .entries
        .iter()
        .map(|&(t, w)| (t, w * scale))
        .collect();
    let total_mass = entries.iter().map(|&(_, w)| w).sum();
    Ok(MassMatched {
        entries,
        total_mass,
    })
}

/// The negotiated mixture at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureOutcome {
    /// Renormalized full-vocabulary mixture.
    pub p_mix: TokenDistribution,
    /// Adaptive weight: the base distribution's top-1 probability.
    pub alpha: f64,
    /// Gap between the two largest renormalized mixture probabilities;
    /// equals the top-1 probability when only one token is enumerated.
    pub margin: f64,
    /// Total mass of the mixture before renormalization.
    pub raw_mass: f64,
    pub top1: (TokenId, f64),
    pub top2: Option<(TokenId, f64)>,
}

/// Mixes the base distribution with the mass-matched evidence distribution:
/// `alpha * p + (1 - alpha) * r_tilde` on the candidate set, `alpha * p`
/// elsewhere (residual mass included), then renormalizes.
pub fn negotiate(
    base: &TokenDistribution,
    matched: &MassMatched,
    candidates: &CandidateSet,
) -> Result<MixtureOutcome, DistError> {
    let sorted = crate::dist::sort_descending(base)?;
    let alpha = sorted[0].1;

    let mut mixed: Vec<(TokenId, f64)> = Vec::with_capacity(base.len());
    for &(token, p) in base.entries() {
        let value = if candidates.contains(token) {
            alpha * p + (1.0 - alpha) * matched.weight(token)
        } else {
            alpha * p
        };
        mixed.push((token, value));
    }
    let residual = alpha * base.residual_mass();
    let raw_mass: f64 = mixed.iter().map(|&(_, v)| v).sum::<f64>() + residual;

    for entry in &mut mixed {
        entry.1 /= raw_mass;
    }
    let p_mix = TokenDistribution::new(base.vocab_size(), mixed, residual / raw_mass)?;

    let ranked = crate::dist::sort_descending(&p_mix)?;
    let top1 = ranked[0];
    let top2 = ranked.get(1).copied();
    let margin = match top2 {
        Some((_, p2)) => top1.1 - p2,
        None => top1.1,
    };
    Ok(MixtureOutcome {
        p_mix,
        alpha,
        margin,
        raw_mass,
        top1,
        top2,
    })
}

/// Why a step did not fire the trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldReason {
    /// Singleton knee and a comfortable margin: a confident step.
    CommittedConfident,
    /// The knee selected a single candidate, so the trigger cannot fire
    /// regardless of margin.
    KneeSingleton,
    /// Multiple candidates but the negotiated margin cleared the threshold.
    MarginAboveDelta,
}

/// Outcome of the trigger rule at one step.
///
/// `fired` implies `knee_index > 1` and `margin <= delta`; `reason` is
/// populated exactly when the trigger held.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerDecision {
    pub fired: bool,
    pub reason: Option<HoldReason>,
    pub delta: f64,
}

/// A step is a probable hallucination trigger when the knee kept more than
/// one candidate and the negotiated margin is at most `delta`. Otherwise
/// the engine commits the mixture argmax.
pub fn decide_trigger(
    outcome: &MixtureOutcome,
    candidates: &CandidateSet,
    delta: f64,
) -> TriggerDecision {
    decide_trigger_parts(candidates.knee_index(), outcome.margin, delta)
}

/// The trigger rule on bare `(knee index, margin)` pairs; this is also what
/// frozen-trace replay applies.
pub fn decide_trigger_parts(knee_index: usize, margin: f64, delta: f64) -> TriggerDecision {
    let ambiguous_knee = knee_index > 1;
    let tight_margin = margin <= delta;
    let (fired, reason) = match (ambiguous_knee, tight_margin) {
        (true, true) => (true, None),
        (true, false) => (false, Some(HoldReason::MarginAboveDelta)),
        (false, true) => (false, Some(HoldReason::KneeSingleton)),
        (false, false) => (false, Some(HoldReason::CommittedConfident)),
    };
    TriggerDecision {
        fired,
        reason,
        delta,
    }
}
