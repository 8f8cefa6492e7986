//! Token distributions, deterministic sorting, and knee truncation.
//!
//! A [`TokenDistribution`] is a (possibly sparse) probability distribution
//! over a vocabulary at one decoding step. Sparse entries carry an explicit
//! `residual_mass` for the tokens a provider did not enumerate, so top-k
//! backends still yield a valid distribution.
//!
//! [`knee_truncate`] selects the candidate set for one step: the knee index
//! `k*` maximizes the gap between adjacent sorted probabilities, and the top
//! `k*` tokens form the [`CandidateSet`].

use serde::{Deserialize, Serialize};

/// Tolerance for the normalization invariant (enumerated mass + residual = 1).
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Opaque token identifier: an integer index into a vocabulary table.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for TokenId {
    fn from(id: u32) -> Self {
        TokenId(id)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistError {
    #[error("empty distribution")]
    EmptyDistribution,
    #[error("probability {prob} for token {token} outside [0, 1]")]
    ProbabilityOutOfRange { token: TokenId, prob: f64 },
    #[error("residual mass {0} is negative")]
    NegativeResidual(f64),
    #[error("enumerated mass {enumerated} + residual {residual} deviates from 1 by more than {NORMALIZATION_TOLERANCE}")]
    NotNormalized { enumerated: f64, residual: f64 },
    #[error("token {0} appears more than once")]
    DuplicateToken(TokenId),
    #[error("degenerate candidate mass")]
    DegenerateCandidateMass,
}

/// A normalized next-token distribution.
///
/// Entries are stored sorted by token id; every enumerated probability lies
/// in `[0, 1]` and the enumerated sum plus `residual_mass` equals 1 within
/// [`NORMALIZATION_TOLERANCE`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    vocab_size: usize,
    entries: Vec<(TokenId, f64)>,
    residual_mass: f64,
}

impl TokenDistribution {
    pub fn new(
        vocab_size: usize,
        mut entries: Vec<(TokenId, f64)>,
        residual_mass: f64,
    ) -> Result<Self, DistError> {
        if residual_mass < 0.0 {
            return Err(DistError::NegativeResidual(residual_mass));
        }
        for &(token, prob) in &entries {
            if !(0.0..=1.0).contains(&prob) || prob.is_nan() {
                return Err(DistError::ProbabilityOutOfRange { token, prob });
            }
        }
        entries.sort_by_key(|a| a.0);
        for window in entries.windows(2) {
            if window[0].0 == window[1].0 {
                return Err(DistError::DuplicateToken(window[0].0));
            }
        }
        let enumerated: f64 = entries.iter().map(|&(_, p)| p).sum();
        if (enumerated + residual_mass - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(DistError::NotNormalized {
                enumerated,
                residual: residual_mass,
            });
        }
        Ok(Self {
            vocab_size,
            entries,
            residual_mass,
        })
    }

    /// Dense distribution over `probs.len()` consecutive token ids, residual 0.
    pub fn from_dense(probs: &[f64]) -> Result<Self, DistError> {
        let entries = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| (TokenId(i as u32), p))
            .collect();
        Self::new(probs.len(), entries, 0.0)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Enumerated entries in ascending token-id order.
    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    pub fn residual_mass(&self) -> f64 {
        self.residual_mass
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Probability of an enumerated token; 0 for tokens not enumerated.
    pub fn prob(&self, token: TokenId) -> f64 {
        self.entries
            .binary_search_by(|(t, _)| t.cmp(&token))
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }
}

/// The sorted top-`k*` tokens after knee truncation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    candidates: Vec<(TokenId, f64)>,
    knee_index: usize,
    covered_mass: f64,
}

impl CandidateSet {
    /// Builds a candidate set from an already-sorted candidate list.
    ///
    /// `candidates` must be ordered descending by probability with ties by
    /// ascending token id; `covered_mass` is derived.
    pub fn new(candidates: Vec<(TokenId, f64)>, knee_index: usize) -> Result<Self, DistError> {
        if candidates.is_empty() || knee_index == 0 {
            return Err(DistError::EmptyDistribution);
        }
        assert_eq!(
            candidates.len(),
            knee_index,
            "candidate count must equal the knee index"
        );
        for window in candidates.windows(2) {
            let ordered = window[0].1 > window[1].1
                || (window[0].1 == window[1].1 && window[0].0 < window[1].0);
            assert!(
                ordered,
                "candidates must be sorted by probability desc, id asc"
            );
        }
        let covered_mass = candidates.iter().map(|&(_, p)| p).sum();
        Ok(Self {
            candidates,
            knee_index,
            covered_mass,
        })
    }

    /// Members ordered descending by probability (ties by ascending id).
    pub fn candidates(&self) -> &[(TokenId, f64)] {
        &self.candidates
    }

    pub fn knee_index(&self) -> usize {
        self.knee_index
    }

    /// Total base probability mass on the candidate set.
    pub fn covered_mass(&self) -> f64 {
        self.covered_mass
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.candidates.iter().map(|&(t, _)| t)
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.candidates.iter().any(|&(t, _)| t == token)
    }
}

/// Enumerated tokens ordered descending by probability, ties by ascending id.
///
/// Tie comparisons use the exact stored values.
pub fn sort_descending(dist: &TokenDistribution) -> Result<Vec<(TokenId, f64)>, DistError> {
    if dist.is_empty() {
        return Err(DistError::EmptyDistribution);
    }
    let mut sorted = dist.entries().to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(sorted)
}

/// Knee truncation: `k*` maximizes the adjacent gap `p_(k) - p_(k+1)` over
/// `k in [1, n-1]`, ties broken to the smallest `k`; the top `k*` tokens form
/// the candidate set.
///
/// Only enumerated tokens participate; residual mass never enters the gap
/// computation. A single enumerated token yields `k* = 1`.
pub fn knee_truncate(dist: &TokenDistribution) -> Result<CandidateSet, DistError> {
    let sorted = sort_descending(dist)?;
    let knee_index = knee_index_of_sorted(&sorted);
    let candidates = sorted[..knee_index].to_vec();
    CandidateSet::new(candidates, knee_index)
}

/// Knee index over a descending-sorted probability list.
pub(crate) fn knee_index_of_sorted(sorted: &[(TokenId, f64)]) -> usize {
    if sorted.len() < 2 {
        return 1;
    }
    let mut best_k = 1;
    let mut best_gap = sorted[0].1 - sorted[1].1;
    for k in 2..sorted.len() {
        let gap = sorted[k - 1].1 - sorted[k].1;
        if gap > best_gap {
            best_gap = gap;
            best_k = k;
        }
    }
    best_k
}
