//! Shared integration fixtures: small tabular worlds with hand-placed
//! probabilities that steer decodes through specific control flow.
//!
//! Each test target compiles this module separately and uses a subset.
#![allow(dead_code)]

use ecrd::decider::ScriptedVerdict;
use ecrd::engine::{DecodeConfig, DecodeMode, GlobalDescription};
use ecrd::evidence::RegionAnnotation;
use ecrd::{TabularModel, Vocabulary};

pub struct Fixture {
    pub generation: TabularModel,
    pub scoring: TabularModel,
    pub config: DecodeConfig,
    pub prompt: &'static str,
    pub script: Vec<ScriptedVerdict>,
}

fn vocab(surfaces: &[&str]) -> Vocabulary {
    Vocabulary::new(surfaces.iter().map(|s| s.to_string()).collect())
}

pub const B1_SENTENCE: &str =
    "The first dress from the right-hand side is blue, partially hidden by the tree.";

/// Mid-chain grounding scenario: the {"blue", "red"} step fires the
/// trigger; the scripted decider forces "blue" and contributes a sentence
/// whose prefixes make the supervisor later prefer "tree" over the base
/// favorite "near".
pub fn case_b1() -> Fixture {
    let v = vocab(&[
        "describe",
        "the",
        "dress",
        "is",
        "red",
        "blue",
        "green",
        "near",
        "tree",
        ".",
        "a",
        "garden",
        "photo",
        "The",
        "first",
        "from",
        "right-hand",
        "side",
        "blue,",
        "partially",
        "hidden",
        "by",
        "tree.",
    ]);

    let mut generation = TabularModel::with_uniform_default(v.clone()).unwrap();
    generation
        .add_entry_surfaces(&["describe"], &[("the", 0.95), ("dress", 0.05)])
        .unwrap();
    generation
        .add_entry_surfaces(&["the"], &[("dress", 0.9), ("is", 0.1)])
        .unwrap();
    generation
        .add_entry_surfaces(&["dress"], &[("is", 0.9), ("the", 0.1)])
        .unwrap();
    // The pivotal step: base slightly prefers "red" over "blue".
    generation
        .add_entry_surfaces(&["is"], &[("red", 0.48), ("blue", 0.45), ("green", 0.07)])
        .unwrap();
    // After "blue": base prefers "near"; the pooled sentence should flip
    // this to "tree".
    generation
        .add_entry_surfaces(
            &["blue"],
            &[("near", 0.50), ("tree", 0.45), ("green", 0.05)],
        )
        .unwrap();
    generation
        .add_entry_surfaces(&["red"], &[("green", 1.0)])
        .unwrap();
    generation
        .add_entry_surfaces(&["tree"], &[(".", 1.0)])
        .unwrap();
    generation
        .add_entry_surfaces(&["near"], &[(".", 1.0)])
        .unwrap();
    generation
        .add_entry_surfaces(&["green"], &[(".", 1.0)])
        .unwrap();

    // The scoring side: the global description is uninformative (uniform
    // conditionals); the decider sentence carries strong support for
    // "tree" at its late prefixes.
    let mut scoring = TabularModel::with_uniform_default(v.clone()).unwrap();
    scoring
        .add_entry_surfaces(&["hidden"], &[("tree", 0.85), ("near", 0.01)])
        .unwrap();
    scoring
        .add_entry_surfaces(&["by"], &[("tree", 0.90), ("near", 0.01)])
        .unwrap();

    let config = DecodeConfig {
        mode: DecodeMode::Ecrd,
        delta: 0.08,
        max_tokens: 16,
        stop_tokens: vec![v.id_of(".").unwrap()],
        tail_len: 8,
        global_description: GlobalDescription::Provided {
            text: "a garden photo".into(),
        },
        record_timings: false,
        backend_descriptor: "tabular:case-b1".into(),
        scoring_descriptor: "tabular:case-b1-scoring".into(),
        decider_descriptor: "script:case-b1".into(),
        ..DecodeConfig::default()
    };

    Fixture {
        generation,
        scoring,
        config,
        prompt: "describe",
        script: vec![ScriptedVerdict {
            chosen_id: v.id_of("blue").unwrap().0,
            sentence: B1_SENTENCE.into(),
            annotations: vec![RegionAnnotation {
                bbox: [420.0, 180.0, 560.0, 410.0],
                label: Some("dress".into()),
            }],
        }],
    }
}

pub const B2_SENTENCE: &str = "The number behind the cardboard box with the 'favorita' brand \
                               and banana illustration is '300'.";

/// Final-answer scenario: the {"5", "3"} step fires, the decider commits
/// "3" with the "300" sentence, and the supervisor alone then selects "0"
/// twice without further calls.
pub fn case_b2() -> Fixture {
    let v = vocab(&[
        "ask",
        "the",
        "number",
        "is",
        "5",
        "3",
        "0",
        "7",
        ".",
        "a",
        "market",
        "stall",
        "The",
        "behind",
        "cardboard",
        "box",
        "with",
        "'favorita'",
        "brand",
        "and",
        "banana",
        "illustration",
        "'300'.",
    ]);

    let mut generation = TabularModel::with_uniform_default(v.clone()).unwrap();
    generation
        .add_entry_surfaces(&["ask"], &[("the", 0.9), ("number", 0.1)])
        .unwrap();
    generation
        .add_entry_surfaces(&["the"], &[("number", 0.9), ("is", 0.1)])
        .unwrap();
    generation
        .add_entry_surfaces(&["number"], &[("is", 0.9), ("the", 0.1)])
        .unwrap();
    // The decisive step: base leans "5", the evidence pool leans "3", and
    // the negotiated gap stays small.
    generation
        .add_entry_surfaces(&["is"], &[("5", 0.50), ("3", 0.45), ("7", 0.05)])
        .unwrap();
    generation
        .add_entry_surfaces(&["3"], &[("0", 0.40), ("5", 0.35), ("7", 0.25)])
        .unwrap();
    generation
        .add_entry_surfaces(&["0"], &[("0", 0.40), ("7", 0.35), ("5", 0.25)])
        .unwrap();
    generation
        .add_entry_surfaces(&["0", "0"], &[(".", 1.0)])
        .unwrap();
    generation
        .add_entry_surfaces(&["5"], &[("7", 1.0)])
        .unwrap();

    let mut scoring = TabularModel::with_uniform_default(v.clone()).unwrap();
    // Global description "a market stall": a mild lean toward "3" at its
    // last prefix, neutral between the digits otherwise.
    scoring
        .add_entry_surfaces(
            &["market"],
            &[("3", 0.18), ("5", 0.10), ("0", 0.10), ("7", 0.10)],
        )
        .unwrap();
    // The '300' sentence: its final prefix (ending "is") strongly supports
    // the digit "0".
    scoring
        .add_entry_surfaces(&["is"], &[("0", 0.95), ("5", 0.002), ("7", 0.002)])
        .unwrap();

    let config = DecodeConfig {
        mode: DecodeMode::Ecrd,
        delta: 0.08,
        max_tokens: 16,
        stop_tokens: vec![v.id_of(".").unwrap()],
        tail_len: 8,
        global_description: GlobalDescription::Provided {
            text: "a market stall".into(),
        },
        record_timings: false,
        backend_descriptor: "tabular:case-b2".into(),
        scoring_descriptor: "tabular:case-b2-scoring".into(),
        decider_descriptor: "script:case-b2".into(),
        ..DecodeConfig::default()
    };

    Fixture {
        generation,
        scoring,
        config,
        prompt: "ask",
        script: vec![ScriptedVerdict {
            chosen_id: v.id_of("3").unwrap().0,
            sentence: B2_SENTENCE.into(),
            annotations: vec![RegionAnnotation {
                bbox: [77.0, 300.0, 160.0, 352.0],
                label: Some("price tag".into()),
            }],
        }],
    }
}

/// A fixture where mean-over-prefix and min-over-prefix scoring disagree on
/// the argmax: the description supports "x" steadily (0.45, 0.45) and "y"
/// with one sharp peak (0.55, 0.01).
pub fn mean_vs_min_divergence() -> Fixture {
    let v = vocab(&["q", "x", "y", "z", "d1", "d2", "."]);
    let mut generation = TabularModel::with_uniform_default(v.clone()).unwrap();
    generation
        .add_entry_surfaces(&["q"], &[("x", 0.50), ("y", 0.48), ("z", 0.02)])
        .unwrap();
    generation
        .add_entry_surfaces(&["x"], &[(".", 1.0)])
        .unwrap();
    generation
        .add_entry_surfaces(&["y"], &[(".", 1.0)])
        .unwrap();

    let mut scoring = TabularModel::with_uniform_default(v.clone()).unwrap();
    scoring
        .add_entry_surfaces(&[], &[("x", 0.45), ("y", 0.55)])
        .unwrap();
    scoring
        .add_entry_surfaces(&["d1"], &[("x", 0.45), ("y", 0.01)])
        .unwrap();

    let config = DecodeConfig {
        mode: DecodeMode::VdgdBaseline,
        delta: 0.0,
        max_tokens: 8,
        stop_tokens: vec![v.id_of(".").unwrap()],
        global_description: GlobalDescription::Provided {
            text: "d1 d2".into(),
        },
        record_timings: false,
        ..DecodeConfig::default()
    };

    Fixture {
        generation,
        scoring,
        config,
        prompt: "q",
        script: vec![],
    }
}
