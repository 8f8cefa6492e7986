//! Deterministic table-driven model, the desk-scale substrate for fixtures
//! and oracle tests.
//!
//! Context lookup is exact token-sequence match, falling back to
//! progressively shorter suffixes of the query prefix (the empty suffix
//! included), then to the default distribution. This lets tiny hand-written
//! tables express worked decoding scenarios.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{
    BackendCapabilities, BackendError, ConditioningContext, GenerationBackend, ScoringBackend,
    Vocabulary,
};
use crate::dist::{TokenDistribution, TokenId};

#[derive(Debug, Clone)]
pub struct TabularModel {
    vocab: Vocabulary,
    default_probs: Vec<f64>,
    // Entry order is preserved for lossless file round-trips.
    order: Vec<Vec<TokenId>>,
    table: HashMap<Vec<TokenId>, TokenDistribution>,
}

#[derive(Serialize, Deserialize)]
struct TabularFile {
    vocab: Vec<String>,
    default: Vec<f64>,
    entries: Vec<TabularEntry>,
}

#[derive(Serialize, Deserialize)]
struct TabularEntry {
    context: Vec<u32>,
    probs: BTreeMap<String, f64>,
}

impl TabularModel {
    pub fn new(vocab: Vocabulary, default_probs: Vec<f64>) -> Result<Self, BackendError> {
        if default_probs.len() != vocab.len() {
            return Err(BackendError::InvalidModel(format!(
                "default distribution has {} probs for a vocabulary of {}",
                default_probs.len(),
                vocab.len()
            )));
        }
        TokenDistribution::from_dense(&default_probs)?;
        Ok(Self {
            vocab,
            default_probs,
            order: Vec::new(),
            table: HashMap::new(),
        })
    }

    /// Uniform default distribution over the whole vocabulary.
    pub fn with_uniform_default(vocab: Vocabulary) -> Result<Self, BackendError> {
        let n = vocab.len();
        if n == 0 {
            return Err(BackendError::InvalidModel("empty vocabulary".into()));
        }
        let default = vec![1.0 / n as f64; n];
        Self::new(vocab, default)
    }

    /// Registers the distribution returned for prefixes ending in `context`.
    /// Sparse probabilities are completed with residual mass.
    pub fn add_entry(
        &mut self,
        context: Vec<TokenId>,
        probs: Vec<(TokenId, f64)>,
    ) -> Result<&mut Self, BackendError> {
        let sum: f64 = probs.iter().map(|&(_, p)| p).sum();
        let residual = (1.0 - sum).max(0.0);
        let dist = TokenDistribution::new(self.vocab.len(), probs, residual)?;
        if !self.table.contains_key(&context) {
            self.order.push(context.clone());
        }
        self.table.insert(context, dist);
        Ok(self)
    }

    /// Surface-string convenience for fixture construction. Unknown surfaces
    /// are an error here (silent drops would corrupt a fixture).
    pub fn add_entry_surfaces(
        &mut self,
        context: &[&str],
        probs: &[(&str, f64)],
    ) -> Result<&mut Self, BackendError> {
        let context = context
            .iter()
            .map(|s| {
                self.vocab
                    .id_of(s)
                    .ok_or_else(|| BackendError::InvalidModel(format!("unknown surface {s:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let probs = probs
            .iter()
            .map(|&(s, p)| {
                self.vocab
                    .id_of(s)
                    .map(|t| (t, p))
                    .ok_or_else(|| BackendError::InvalidModel(format!("unknown surface {s:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.add_entry(context, probs)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Longest-suffix context resolution.
    fn resolve(&self, prefix: &[TokenId]) -> TokenDistribution {
        for start in 0..=prefix.len() {
            if let Some(dist) = self.table.get(&prefix[start..]) {
                return dist.clone();
            }
        }
        TokenDistribution::from_dense(&self.default_probs)
            .expect("default distribution validated at construction")
    }

    pub fn to_json(&self) -> serde_json::Value {
        let entries = self
            .order
            .iter()
            .map(|context| {
                let dist = &self.table[context];
                TabularEntry {
                    context: context.iter().map(|t| t.0).collect(),
                    probs: dist
                        .entries()
                        .iter()
                        .map(|&(t, p)| (t.0.to_string(), p))
                        .collect(),
                }
            })
            .collect::<Vec<_>>();
        serde_json::to_value(TabularFile {
            vocab: (0..self.vocab.len())
                .map(|i| self.vocab.surface(TokenId(i as u32)).unwrap().to_string())
                .collect(),
            default: self.default_probs.clone(),
            entries,
        })
        .expect("tabular file serialization cannot fail")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, BackendError> {
        let file: TabularFile =
            serde_json::from_value(value).map_err(|e| BackendError::InvalidModel(e.to_string()))?;
        let mut model = Self::new(Vocabulary::new(file.vocab), file.default)?;
        for entry in file.entries {
            let context = entry.context.into_iter().map(TokenId).collect();
            let probs = entry
                .probs
                .into_iter()
                .map(|(id, p)| {
                    id.parse::<u32>().map(|id| (TokenId(id), p)).map_err(|e| {
                        BackendError::InvalidModel(format!("bad token id {id:?}: {e}"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            model.add_entry(context, probs)?;
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidModel(format!("{}: {e}", path.display())))?;
        let value = serde_json::from_str(&text)
            .map_err(|e| BackendError::InvalidModel(format!("{}: {e}", path.display())))?;
        Self::from_json(value)
    }

    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_json()).unwrap())
            .map_err(|e| BackendError::InvalidModel(format!("{}: {e}", path.display())))
    }

    fn caps(&self) -> BackendCapabilities {
        BackendCapabilities {
            max_top_k: self.vocab.len(),
            concurrent: true,
            tokenizer_id: "whitespace".into(),
        }
    }
}

impl PartialEq for TabularModel {
    fn eq(&self, other: &Self) -> bool {
        self.to_json() == other.to_json()
    }
}

impl GenerationBackend for TabularModel {
    fn capabilities(&self) -> BackendCapabilities {
        self.caps()
    }

    fn next_distribution(
        &self,
        prefix: &[TokenId],
        _ctx: &ConditioningContext,
    ) -> Result<TokenDistribution, BackendError> {
        Ok(self.resolve(prefix))
    }

    fn surface(&self, token: TokenId) -> Option<String> {
        self.vocab.surface(token).map(str::to_string)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        Ok(self.vocab.tokenize(text))
    }
}

impl ScoringBackend for TabularModel {
    fn capabilities(&self) -> BackendCapabilities {
        self.caps()
    }

    fn score_conditionals(
        &self,
        tokens: &[TokenId],
        prefix: &[TokenId],
        _ctx: &ConditioningContext,
    ) -> Result<Vec<f64>, BackendError> {
        let dist = self.resolve(prefix);
        Ok(tokens.iter().map(|&t| dist.prob(t)).collect())
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        Ok(self.vocab.tokenize(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TabularModel {
        let vocab = Vocabulary::new(
            ["ctx0", "the", "cat", "dog"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        let mut m = TabularModel::with_uniform_default(vocab).unwrap();
        m.add_entry_surfaces(&["ctx0", "the"], &[("cat", 0.6), ("dog", 0.4)])
            .unwrap();
        m
    }

    #[test]
    fn exact_lookup_returns_table_values() {
        let m = model();
        let ctx = ConditioningContext::default();
        let prefix = m.vocab().tokenize("ctx0 the");
        let d = m.next_distribution(&prefix, &ctx).unwrap();
        assert_eq!(d.prob(m.vocab().id_of("cat").unwrap()), 0.6);
        assert_eq!(d.prob(m.vocab().id_of("dog").unwrap()), 0.4);
    }

    #[test]
    fn unseen_context_uses_default() {
        let m = model();
        let ctx = ConditioningContext::default();
        let prefix = m.vocab().tokenize("dog dog dog");
        let d = m.next_distribution(&prefix, &ctx).unwrap();
        for i in 0..4 {
            assert!((d.prob(TokenId(i)) - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn longest_suffix_wins() {
        let mut m = model();
        m.add_entry_surfaces(&["the"], &[("dog", 1.0)]).unwrap();
        let ctx = ConditioningContext::default();
        // Exact ["ctx0","the"] entry shadows the shorter ["the"] suffix.
        let d = m
            .next_distribution(&m.vocab().tokenize("ctx0 the"), &ctx)
            .unwrap();
        assert_eq!(d.prob(m.vocab().id_of("cat").unwrap()), 0.6);
        // A longer prefix with no exact entry falls back to the ["the"] suffix.
        let d = m
            .next_distribution(&m.vocab().tokenize("cat ctx0 cat the"), &ctx)
            .unwrap();
        assert_eq!(d.prob(m.vocab().id_of("dog").unwrap()), 1.0);
    }

    #[test]
    fn scoring_returns_exact_table_values_and_zero_for_absent() {
        let mut m = model();
        m.add_entry_surfaces(&["the"], &[("dog", 0.9)]).unwrap();
        let ctx = ConditioningContext::default();
        let toks = [
            m.vocab().id_of("dog").unwrap(),
            m.vocab().id_of("cat").unwrap(),
        ];
        let scores = m
            .score_conditionals(&toks, &m.vocab().tokenize("the"), &ctx)
            .unwrap();
        assert_eq!(scores, vec![0.9, 0.0]);
    }

    #[test]
    fn file_round_trip_is_lossless() {
        let m = model();
        let json = m.to_json();
        let restored = TabularModel::from_json(json.clone()).unwrap();
        assert_eq!(m, restored);
        assert_eq!(restored.to_json(), json);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        assert_eq!(TabularModel::load(&path).unwrap(), m);
    }

    #[test]
    fn repeated_queries_are_identical() {
        let m = model();
        let ctx = ConditioningContext::default();
        let prefix = m.vocab().tokenize("ctx0 the");
        let a = m.next_distribution(&prefix, &ctx).unwrap();
        let b = m.next_distribution(&prefix, &ctx).unwrap();
        assert_eq!(a, b);
    }
}
