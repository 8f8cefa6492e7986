//! JSONL persistence for decode traces.
//!
//! Line 1 is a header object holding the config snapshot, one line per
//! step record follows, and the last line is a footer with totals, final
//! text, pool state, and the abort flag. Reading a written trace and
//! writing it again reproduces the bytes exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{DecodeConfig, DecodeTrace, StepRecord, Totals};
use crate::evidence::PoolSnapshot;

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace has no header line")]
    MissingHeader,
    #[error("trace has no footer line")]
    MissingFooter,
    #[error("trace line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: DecodeConfig,
}

#[derive(Serialize, Deserialize)]
struct Footer {
    totals: Totals,
    final_text: String,
    pool: PoolSnapshot,
    aborted: Option<String>,
}

pub fn to_jsonl(trace: &DecodeTrace) -> String {
    let mut out = String::new();
    let header = Header {
        config: trace.config.clone(),
    };
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for step in &trace.steps {
        out.push_str(&serde_json::to_string(step).expect("step serializes"));
        out.push('\n');
    }
    let footer = Footer {
        totals: trace.totals,
        final_text: trace.final_text.clone(),
        pool: trace.pool.clone(),
        aborted: trace.aborted.clone(),
    };
    out.push_str(&serde_json::to_string(&footer).expect("footer serializes"));
    out.push('\n');
    out
}

pub fn from_jsonl(text: &str) -> Result<DecodeTrace, TraceError> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(TraceError::MissingHeader);
    }
    if lines.len() < 2 {
        return Err(TraceError::MissingFooter);
    }
    let header: Header =
        serde_json::from_str(lines[0]).map_err(|source| TraceError::Line { line: 1, source })?;
    let footer: Footer =
        serde_json::from_str(lines[lines.len() - 1]).map_err(|source| TraceError::Line {
            line: lines.len(),
            source,
        })?;
    let mut steps = Vec::with_capacity(lines.len() - 2);
    for (i, line) in lines[1..lines.len() - 1].iter().enumerate() {
        let step: StepRecord = serde_json::from_str(line).map_err(|source| TraceError::Line {
            line: i + 2,
            source,
        })?;
        steps.push(step);
    }
    Ok(DecodeTrace {
        config: header.config,
        steps,
        final_text: footer.final_text,
        pool: footer.pool,
        totals: footer.totals,
        aborted: footer.aborted,
    })
}

pub fn write_jsonl(path: &Path, trace: &DecodeTrace) -> Result<(), TraceError> {
    std::fs::write(path, to_jsonl(trace))?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<DecodeTrace, TraceError> {
    from_jsonl(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::tabular::TabularModel;
    use crate::backend::{ConditioningContext, Vocabulary};
    use crate::engine::{decode, Backends, DecodeMode, GlobalDescription};

    fn sample_trace() -> DecodeTrace {
        let vocab = Vocabulary::new(
            ["go", "a", "b", "."]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        let mut model = TabularModel::with_uniform_default(vocab).unwrap();
        model
            .add_entry_surfaces(&["go"], &[("a", 0.6), ("b", 0.38), (".", 0.02)])
            .unwrap();
        model
            .add_entry_surfaces(&["a"], &[("b", 0.9), (".", 0.1)])
            .unwrap();
        model.add_entry_surfaces(&["b"], &[(".", 1.0)]).unwrap();
        let ctx = ConditioningContext::with_id("img");
        let backends = Backends {
            generation: &model,
            scoring: Some(&model),
            decider: None,
        };
        let cfg = crate::engine::DecodeConfig {
            mode: DecodeMode::SupervisorOnly,
            global_description: GlobalDescription::Provided { text: "a b".into() },
            stop_tokens: vec![model.vocab().id_of(".").unwrap()],
            record_timings: false,
            ..Default::default()
        };
        decode(&model.vocab().tokenize("go"), &ctx, &cfg, &backends).unwrap()
    }

    #[test]
    fn jsonl_round_trip_is_byte_exact() {
        let trace = sample_trace();
        let text = to_jsonl(&trace);
        let parsed = from_jsonl(&text).unwrap();
        assert_eq!(parsed, trace);
        assert_eq!(to_jsonl(&parsed), text);
    }

    #[test]
    fn header_and_footer_are_required() {
        assert!(matches!(from_jsonl(""), Err(TraceError::MissingHeader)));
        let trace = sample_trace();
        let text = to_jsonl(&trace);
        let header_only = text.lines().next().unwrap();
        assert!(matches!(
            from_jsonl(header_only),
            Err(TraceError::MissingFooter)
        ));
    }

    #[test]
    fn missing_step_fields_fail_parsing() {
        let trace = sample_trace();
        let text = to_jsonl(&trace);
        let broken: Vec<String> = text
            .lines()
            .map(|l| l.replace("\"margin\":", "\"margin_gone\":"))
            .collect();
        assert!(matches!(
            from_jsonl(&broken.join("\n")),
            Err(TraceError::Line { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let trace = sample_trace();
        write_jsonl(&path, &trace).unwrap();
        let read = read_jsonl(&path).unwrap();
        assert_eq!(read, trace);
    }

    #[test]
    fn gain_tags_survive_persistence() {
        let mut trace = sample_trace();
        assert_eq!(trace.steps[0].gain_tag, crate::engine::GainTag::None);
        trace
            .tag_step(0, crate::engine::GainTag::SupervisorReweight)
            .unwrap();
        assert!(trace.tag_step(99, crate::engine::GainTag::None).is_err());
        let parsed = from_jsonl(&to_jsonl(&trace)).unwrap();
        assert_eq!(
            parsed.steps[0].gain_tag,
            crate::engine::GainTag::SupervisorReweight
        );
    }
}
