//! Offline analysis: the linear latency model, threshold sweeps, and their
//! CSV/JSON reports.
//!
//! End-to-end time per question follows `T = t0 + l0 * r`, where `r` is the
//! number of decider calls: `t0` is the zero-call base time and `l0` the
//! marginal cost of one call. [`fit_latency_model`] recovers both by
//! ordinary least squares from `(r, T)` observations.
//!
//! Sweeps evaluate a grid of thresholds. A live sweep decodes a prompt
//! corpus once per threshold; a frozen sweep re-applies the trigger rule to
//! recorded traces, which is cheap and never re-queries a backend.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backend::{ConditioningContext, GenerationBackend, ScoringBackend};
use crate::decider::Decider;
use crate::engine::{decode, replay, Backends, DecodeConfig, DecodeTrace, EngineError};

/// Threshold grid bracketing the cost-accuracy elbow near 0.08.
pub const DEFAULT_DELTA_GRID: [f64; 7] = [0.00, 0.02, 0.04, 0.06, 0.08, 0.12, 0.16];

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("need at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("underdetermined: all observations share the same call count")]
    Underdetermined,
    #[error("delta grid must be non-empty and strictly increasing")]
    InvalidGrid,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no traces to sweep")]
    EmptyTraces,
    #[error("decode of corpus item {item} failed: {message}")]
    ItemFailed { item: usize, message: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus line {line}: {source}")]
    Corpus {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Fitted linear latency model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    /// Seconds per question at zero decider calls.
    pub t0: f64,
    /// Marginal seconds per decider call.
    pub l0: f64,
    /// Root-mean-square fit residual.
    pub rms_residual: f64,
    pub observations: usize,
}

impl LatencyModel {
    pub fn predict(&self, calls: f64) -> f64 {
        self.t0 + self.l0 * calls
    }
}

/// Ordinary least squares fit of `T = t0 + l0 * r` over `(r, T)` pairs.
pub fn fit_latency_model(observations: &[(f64, f64)]) -> Result<LatencyModel, AnalysisError> {
    if observations.len() < 2 {
        return Err(AnalysisError::TooFewObservations(observations.len()));
    }
    let n = observations.len() as f64;
    let mean_r = observations.iter().map(|&(r, _)| r).sum::<f64>() / n;
    let mean_t = observations.iter().map(|&(_, t)| t).sum::<f64>() / n;
    let var: f64 = observations
        .iter()
        .map(|&(r, _)| (r - mean_r).powi(2))
        .sum();
    if var == 0.0 {
        return Err(AnalysisError::Underdetermined);
    }
    let cov: f64 = observations
        .iter()
        .map(|&(r, t)| (r - mean_r) * (t - mean_t))
        .sum();
    let l0 = cov / var;
    let t0 = mean_t - l0 * mean_r;
    let rms_residual = (observations
        .iter()
        .map(|&(r, t)| (t - (t0 + l0 * r)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(LatencyModel {
        t0,
        l0,
        rms_residual,
        observations: observations.len(),
    })
}

/// Pulls `(decider calls, wall time)` observations out of decode traces.
pub fn latency_observations(traces: &[DecodeTrace]) -> Vec<(f64, f64)> {
    traces
        .iter()
        .map(|t| (t.totals.decider_calls as f64, t.totals.wall_time_s))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    /// Mean decider calls (live) or mean replayed trigger count (frozen).
    pub r: f64,
    pub mean_time: f64,
    /// Mean exact-match score over items with an answer key; absent when
    /// no key was provided.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

fn validate_grid(grid: &[f64]) -> Result<(), AnalysisError> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AnalysisError::InvalidGrid);
    }
    Ok(())
}

/// Re-applies the trigger rule to frozen traces across the grid. Times are
/// the recorded wall times; they do not vary with the threshold.
pub fn sweep_frozen(traces: &[DecodeTrace], grid: &[f64]) -> Result<SweepReport, AnalysisError> {
    validate_grid(grid)?;
    if traces.is_empty() {
        return Err(AnalysisError::EmptyTraces);
    }
    let n = traces.len() as f64;
    let mean_time = traces.iter().map(|t| t.totals.wall_time_s).sum::<f64>() / n;
    let mut rows = Vec::with_capacity(grid.len());
    for &delta in grid {
        let mut total = 0usize;
        for trace in traces {
            total += replay(trace, delta)?.trigger_count;
        }
        rows.push(SweepRow {
            delta,
            r: total as f64 / n,
            mean_time,
            score: None,
        });
    }
    Ok(SweepReport { rows })
}

/// One prompt of a sweep corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub prompt: String,
    #[serde(default)]
    pub context_id: Option<String>,
    /// Exact-match answer key; rows carry a score only when present.
    #[serde(default)]
    pub answer: Option<String>,
}

/// Reads a JSONL corpus, one item per line.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusItem>, AnalysisError> {
    let text = std::fs::read_to_string(path)?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        items.push(
            serde_json::from_str(line).map_err(|source| AnalysisError::Corpus {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(items)
}

/// Per-item backend bindings for a live sweep. Deciders are created fresh
/// per decode because scripted deciders consume their verdicts.
pub struct SweepBindings<'a> {
    pub generation: &'a dyn GenerationBackend,
    pub scoring: Option<&'a dyn ScoringBackend>,
    pub decider_factory: &'a (dyn Fn() -> Option<Box<dyn Decider>> + Sync),
}

/// Per-item outcome of a live sweep: decider calls, wall time, and the
/// exact-match verdict when an answer key exists.
type ItemOutcome = Result<(usize, f64, Option<bool>), String>;

/// Decodes the corpus once per grid threshold, fanning items out over at
/// most `jobs` worker threads. Aggregates are accumulated in corpus order,
/// so results do not depend on scheduling. Backends whose capabilities
/// forbid concurrent queries force the fan-out down to one stream.
pub fn sweep_live(
    corpus: &[CorpusItem],
    grid: &[f64],
    base_cfg: &DecodeConfig,
    bindings: &SweepBindings<'_>,
    jobs: usize,
) -> Result<SweepReport, AnalysisError> {
    validate_grid(grid)?;
    if corpus.is_empty() {
        return Err(AnalysisError::EmptyCorpus);
    }
    let concurrent_ok = bindings.generation.capabilities().concurrent
        && bindings
            .scoring
            .map(|s| s.capabilities().concurrent)
            .unwrap_or(true);
    let jobs = if concurrent_ok { jobs.max(1) } else { 1 };
    let mut rows = Vec::with_capacity(grid.len());
    for &delta in grid {
        let mut cfg = base_cfg.clone();
        cfg.delta = delta;
        let results: Mutex<Vec<Option<ItemOutcome>>> = Mutex::new(vec![None; corpus.len()]);
        let cursor = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(corpus.len()) {
                scope.spawn(|| loop {
                    let i = cursor.fetch_add(1, Ordering::SeqCst);
                    if i >= corpus.len() {
                        break;
                    }
                    let outcome = decode_item(&corpus[i], &cfg, bindings);
                    results.lock().unwrap()[i] = Some(outcome);
                });
            }
        });
        let results = results.into_inner().unwrap();
        let mut calls = 0usize;
        let mut time = 0.0;
        let mut scored = 0usize;
        let mut matched = 0usize;
        for (i, result) in results.into_iter().enumerate() {
            let (r, t, hit) = result
                .expect("every item processed")
                .map_err(|message| AnalysisError::ItemFailed { item: i, message })?;
            calls += r;
            time += t;
            if let Some(hit) = hit {
                scored += 1;
                matched += hit as usize;
            }
        }
        let n = corpus.len() as f64;
        rows.push(SweepRow {
            delta,
            r: calls as f64 / n,
            mean_time: time / n,
            score: (scored > 0).then(|| matched as f64 / scored as f64),
        });
    }
    Ok(SweepReport { rows })
}

fn decode_item(item: &CorpusItem, cfg: &DecodeConfig, bindings: &SweepBindings<'_>) -> ItemOutcome {
    let decider = (bindings.decider_factory)();
    let backends = Backends {
        generation: bindings.generation,
        scoring: bindings.scoring,
        decider: decider.as_deref(),
    };
    let prompt = bindings
        .generation
        .tokenize(&item.prompt)
        .map_err(|e| e.to_string())?;
    let ctx = ConditioningContext {
        context_id: item.context_id.clone(),
    };
    let trace = decode(&prompt, &ctx, cfg, &backends).map_err(|e| e.to_string())?;
    if let Some(reason) = &trace.aborted {
        return Err(format!("aborted: {reason}"));
    }
    let hit = item
        .answer
        .as_ref()
        .map(|answer| answer.trim() == trace.final_text.trim());
    Ok((trace.totals.decider_calls, trace.totals.wall_time_s, hit))
}

impl SweepReport {
    /// CSV columns: `delta,r,mean_time,score`; score is empty when absent.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), AnalysisError> {
        let mut csv_writer = csv::Writer::from_writer(writer);
        csv_writer.write_record(["delta", "r", "mean_time", "score"])?;
        for row in &self.rows {
            csv_writer.write_record([
                row.delta.to_string(),
                row.r.to_string(),
                row.mean_time.to_string(),
                row.score.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        csv_writer.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = Vec::new();
        self.write_csv(&mut out).expect("csv to memory cannot fail");
        String::from_utf8(out).expect("csv output is utf-8")
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, AnalysisError> {
        let mut csv_reader = csv::Reader::from_reader(reader);
        let mut rows = Vec::new();
        for record in csv_reader.records() {
            let record = record?;
            let parse =
                |i: usize| -> f64 { record.get(i).unwrap_or("0").parse().unwrap_or(f64::NAN) };
            let score = match record.get(3) {
                Some("") | None => None,
                Some(s) => s.parse().ok(),
            };
            rows.push(SweepRow {
                delta: parse(0),
                r: parse(1),
                mean_time: parse(2),
                score,
            });
        }
        Ok(Self { rows })
    }
}
