//! Command-line front end: decode, replay, sweep, fit-latency.
//!
//! Exit codes: 0 success, 1 backend/decider/runtime failure, 2 usage or
//! configuration error (clap's convention).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use ecrd::backend::remote::{RemoteConfig, WireFormat};
use ecrd::decider::remote::{RemoteDecider, RemoteDeciderConfig};
use ecrd::decider::{Decider, DeciderRequest, DeciderVerdict, ScriptedDecider, ScriptedVerdict};
use ecrd::engine::{DecodeConfig, DecodeMode, GlobalDescription};
use ecrd::{
    fit_latency_model, latency_observations, load_corpus, sweep_frozen, sweep_live, Backends,
    ConditioningContext, GenerationBackend, RemoteModelClient, ScoringBackend, SweepBindings,
    TabularModel, Vocabulary, DEFAULT_DELTA_GRID,
};

#[derive(Parser)]
#[command(
    name = "ecrd",
    about = "Evidence-constrained reweighting decoding engine",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one decode and write its trace.
    Decode(DecodeArgs),
    /// Re-apply the trigger rule to a frozen trace at a new threshold.
    Replay(ReplayArgs),
    /// Evaluate a threshold grid over a corpus or frozen traces.
    Sweep(SweepArgs),
    /// Fit the linear latency model T = t0 + l0 * r.
    FitLatency(FitLatencyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    #[value(name = "ecrd")]
    Ecrd,
    #[value(name = "vdgd_baseline")]
    VdgdBaseline,
    #[value(name = "base_greedy")]
    BaseGreedy,
    #[value(name = "supervisor_only")]
    SupervisorOnly,
}

impl From<ModeArg> for DecodeMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Ecrd => DecodeMode::Ecrd,
            ModeArg::VdgdBaseline => DecodeMode::VdgdBaseline,
            ModeArg::BaseGreedy => DecodeMode::BaseGreedy,
            ModeArg::SupervisorOnly => DecodeMode::SupervisorOnly,
        }
    }
}

fn parse_delta(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if !(0.0..=1.0).contains(&v) || v.is_nan() {
        return Err(format!("delta {v} outside [0, 1]"));
    }
    Ok(v)
}

#[derive(Args, Clone)]
struct BackendOpts {
    /// Generation backend: tabular:FILE or remote:URL.
    #[arg(long)]
    backend: Option<String>,
    /// Evidence-scoring backend; defaults to the generation backend spec
    /// (loaded as a separate handle).
    #[arg(long)]
    scoring_backend: Option<String>,
    /// Decider: script:FILE or remote:URL.
    #[arg(long)]
    decider: Option<String>,
    /// Decoding mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Uncertainty threshold in [0, 1].
    #[arg(long, value_parser = parse_delta)]
    delta: Option<f64>,
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Prefix tokens shown to the decider.
    #[arg(long)]
    tail: Option<usize>,
    /// Stop-token surface; repeatable.
    #[arg(long = "stop")]
    stop: Vec<String>,
    /// Global description text (default: generated by the backend).
    #[arg(long)]
    global_description: Option<String>,
    /// File holding the global description text.
    #[arg(long, conflicts_with = "global_description")]
    global_description_file: Option<PathBuf>,
    /// Template wrapped around evidence prefixes when scoring.
    #[arg(long)]
    scoring_template: Option<String>,
    /// Record zeros instead of wall-clock timings (byte-stable traces).
    #[arg(long)]
    no_timings: bool,
    /// Conditioning context id (e.g. an image handle).
    #[arg(long)]
    context: Option<String>,
    /// JSON config file; values in the file override flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    backend: BackendOpts,
    /// Prompt text.
    #[arg(long)]
    prompt: Option<String>,
    /// File holding the prompt text.
    #[arg(long, conflicts_with = "prompt")]
    prompt_file: Option<PathBuf>,
    /// Where to write the JSONL trace.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Frozen trace to replay.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_parser = parse_delta)]
    delta: f64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    backend: BackendOpts,
    /// JSONL corpus of {"prompt", "context_id"?, "answer"?} items.
    #[arg(long, required_unless_present = "frozen")]
    corpus: Option<PathBuf>,
    /// Frozen trace files to replay instead of decoding live.
    #[arg(long, num_args = 1.., conflicts_with = "corpus")]
    frozen: Vec<PathBuf>,
    /// Comma-separated strictly increasing threshold grid.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    /// Concurrent decode streams.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Write the CSV report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitLatencyArgs {
    /// Trace files supplying (decider calls, wall time) observations.
    #[arg(long, num_args = 1.., required_unless_present = "observations")]
    traces: Vec<PathBuf>,
    /// CSV file with header r,T.
    #[arg(long, conflicts_with = "traces")]
    observations: Option<PathBuf>,
    /// Write the JSON model here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Config-file schema. Every field is optional; present values override
/// the corresponding flags.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    backend: Option<String>,
    scoring_backend: Option<String>,
    decider: Option<String>,
    mode: Option<String>,
    delta: Option<f64>,
    max_tokens: Option<usize>,
    tail: Option<usize>,
    stop: Option<Vec<String>>,
    global_description: Option<String>,
    scoring_template: Option<String>,
    no_timings: Option<bool>,
    context: Option<String>,
    remote: Option<RemoteSection>,
}

/// Remote-endpoint settings shared by remote backend and decider specs.
#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct RemoteSection {
    timeout_s: Option<f64>,
    top_k: Option<usize>,
    /// Name of the environment variable holding the bearer token.
    auth_env: Option<String>,
    /// Vocabulary file (JSON list of surfaces) for tokenization.
    vocab: Option<PathBuf>,
    no_cache: Option<bool>,
    /// "native" or "completions".
    wire: Option<String>,
    max_retries: Option<u32>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    };
    std::process::exit(code);
}

/// Marker for configuration mistakes that should exit with code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(message.into()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decode(args) => cmd_decode(args),
        Command::Replay(args) => cmd_replay(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::FitLatency(args) => cmd_fit_latency(args),
    }
}

/// Fully resolved run options after merging flags with the config file.
struct Resolved {
    backend_spec: String,
    scoring_spec: String,
    decider_spec: Option<String>,
    config: DecodeConfig,
    /// Stop-token surfaces, resolved to ids once a backend exists.
    stop_surfaces: Vec<String>,
    context: Option<String>,
    remote: RemoteSection,
}

fn resolve(opts: &BackendOpts) -> Result<Resolved> {
    let file: ConfigFile = match &opts.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("config {}: {e}", path.display())))?
        }
        None => ConfigFile::default(),
    };

    let backend_spec = file
        .backend
        .clone()
        .or_else(|| opts.backend.clone())
        .ok_or_else(|| usage("--backend is required (or set \"backend\" in --config)"))?;
    let scoring_spec = file
        .scoring_backend
        .clone()
        .or_else(|| opts.scoring_backend.clone())
        .unwrap_or_else(|| backend_spec.clone());
    let decider_spec = file.decider.clone().or_else(|| opts.decider.clone());

    let mode = match file.mode.as_deref() {
        Some("ecrd") => DecodeMode::Ecrd,
        Some("vdgd_baseline") => DecodeMode::VdgdBaseline,
        Some("base_greedy") => DecodeMode::BaseGreedy,
        Some("supervisor_only") => DecodeMode::SupervisorOnly,
        Some(other) => return Err(usage(format!("unknown mode {other:?} in config"))),
        None => opts.mode.map(Into::into).unwrap_or_default(),
    };
    let delta = file.delta.or(opts.delta).unwrap_or(0.08);
    if !(0.0..=1.0).contains(&delta) || delta.is_nan() {
        return Err(usage(format!("delta {delta} outside [0, 1]")));
    }

    let global_description = match (&opts.global_description, &opts.global_description_file) {
        (Some(text), _) => Some(text.clone()),
        (None, Some(path)) => Some(
            std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?
                .trim()
                .to_string(),
        ),
        (None, None) => None,
    };
    let global_description = file
        .global_description
        .clone()
        .or(global_description)
        .map(|text| GlobalDescription::Provided { text })
        .unwrap_or(GlobalDescription::BackendGenerated);

    let stop = file.stop.clone().unwrap_or_else(|| opts.stop.clone());

    let config = DecodeConfig {
        mode,
        delta,
        max_tokens: file.max_tokens.or(opts.max_tokens).unwrap_or(256),
        stop_tokens: Vec::new(), // resolved against the backend below
        tail_len: file.tail.or(opts.tail).unwrap_or(64),
        scoring_template: file
            .scoring_template
            .clone()
            .or_else(|| opts.scoring_template.clone())
            .unwrap_or_default(),
        global_description,
        record_timings: !file.no_timings.unwrap_or(opts.no_timings),
        backend_descriptor: backend_spec.clone(),
        scoring_descriptor: scoring_spec.clone(),
        decider_descriptor: decider_spec.clone().unwrap_or_default(),
        ..DecodeConfig::default()
    };

    Ok(Resolved {
        backend_spec,
        scoring_spec,
        decider_spec,
        config,
        stop_surfaces: stop,
        context: file.context.clone().or_else(|| opts.context.clone()),
        remote: file.remote.clone().unwrap_or_default(),
    })
}

enum AnyBackend {
    Tabular(TabularModel),
    Remote(RemoteModelClient),
}

impl AnyBackend {
    fn load(spec: &str, remote: &RemoteSection) -> Result<Self> {
        match spec.split_once(':') {
            Some(("tabular", path)) => Ok(AnyBackend::Tabular(
                TabularModel::load(Path::new(path))
                    .with_context(|| format!("loading tabular model {path}"))?,
            )),
            Some(("remote", url)) => {
                let mut config = RemoteConfig::new(url);
                if let Some(t) = remote.timeout_s {
                    config.timeout_s = t;
                }
                if let Some(k) = remote.top_k {
                    config.top_k = k;
                }
                if let Some(r) = remote.max_retries {
                    config.retry.max_retries = r;
                }
                config.auth_env = remote.auth_env.clone();
                config.no_cache = remote.no_cache.unwrap_or(false);
                config.wire = match remote.wire.as_deref() {
                    None | Some("native") => WireFormat::Native,
                    Some("completions") => WireFormat::Completions,
                    Some(other) => return Err(usage(format!("unknown wire format {other:?}"))),
                };
                let mut client = RemoteModelClient::new(config);
                if let Some(vocab_path) = &remote.vocab {
                    let text = std::fs::read_to_string(vocab_path)
                        .with_context(|| format!("reading {}", vocab_path.display()))?;
                    let surfaces: Vec<String> = serde_json::from_str(&text)
                        .map_err(|e| usage(format!("vocab file: {e}")))?;
                    client = client.with_vocabulary(Vocabulary::new(surfaces));
                }
                Ok(AnyBackend::Remote(client))
            }
            _ => Err(usage(format!(
                "backend spec {spec:?} must be tabular:FILE or remote:URL"
            ))),
        }
    }

    fn as_generation(&self) -> &dyn GenerationBackend {
        match self {
            AnyBackend::Tabular(m) => m,
            AnyBackend::Remote(c) => c,
        }
    }

    fn as_scoring(&self) -> &dyn ScoringBackend {
        match self {
            AnyBackend::Tabular(m) => m,
            AnyBackend::Remote(c) => c,
        }
    }
}

enum AnyDecider {
    Scripted(Vec<ScriptedVerdict>),
    Remote(Arc<RemoteDecider>),
}

/// Shares one remote decider across decode streams.
struct SharedDecider(Arc<RemoteDecider>);

impl Decider for SharedDecider {
    fn decide(&self, request: &DeciderRequest) -> Result<DeciderVerdict, ecrd::DeciderError> {
        self.0.decide(request)
    }
}

impl AnyDecider {
    fn load(spec: &str, remote: &RemoteSection) -> Result<Self> {
        match spec.split_once(':') {
            Some(("script", path)) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading script {path}"))?;
                let verdicts: Vec<ScriptedVerdict> = serde_json::from_str(&text)
                    .map_err(|e| usage(format!("script {path}: {e}")))?;
                Ok(AnyDecider::Scripted(verdicts))
            }
            Some(("remote", url)) => {
                let mut config = RemoteDeciderConfig::new(url);
                if let Some(t) = remote.timeout_s {
                    config.timeout_s = t;
                }
                if let Some(r) = remote.max_retries {
                    config.retry.max_retries = r;
                }
                config.auth_env = remote.auth_env.clone();
                Ok(AnyDecider::Remote(Arc::new(RemoteDecider::new(config))))
            }
            _ => Err(usage(format!(
                "decider spec {spec:?} must be script:FILE or remote:URL"
            ))),
        }
    }

    fn fresh(&self) -> Box<dyn Decider> {
        match self {
            AnyDecider::Scripted(verdicts) => Box::new(ScriptedDecider::new(verdicts.clone())),
            AnyDecider::Remote(decider) => Box::new(SharedDecider(decider.clone())),
        }
    }
}

fn resolve_stops(
    surfaces: &[String],
    backend: &dyn GenerationBackend,
) -> Result<Vec<ecrd::TokenId>> {
    let mut tokens = Vec::new();
    for surface in surfaces {
        let ids = backend
            .tokenize(surface)
            .map_err(|e| anyhow!("tokenizing stop {surface:?}: {e}"))?;
        if ids.is_empty() {
            return Err(usage(format!("stop token {surface:?} not in vocabulary")));
        }
        tokens.extend(ids);
    }
    Ok(tokens)
}

fn cmd_decode(args: DecodeArgs) -> Result<()> {
    let mut resolved = resolve(&args.backend)?;
    let prompt_text = match (&args.prompt, &args.prompt_file) {
        (Some(text), _) => text.clone(),
        (None, Some(path)) => std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .trim()
            .to_string(),
        (None, None) => return Err(usage("--prompt or --prompt-file is required")),
    };

    let backend = AnyBackend::load(&resolved.backend_spec, &resolved.remote)?;
    let scoring = AnyBackend::load(&resolved.scoring_spec, &resolved.remote)?;
    let decider = match &resolved.decider_spec {
        Some(spec) => Some(AnyDecider::load(spec, &resolved.remote)?),
        None => None,
    };
    if resolved.config.mode == DecodeMode::Ecrd && decider.is_none() {
        return Err(usage("mode ecrd requires --decider"));
    }
    resolved.config.stop_tokens = resolve_stops(&resolved.stop_surfaces, backend.as_generation())?;

    let prompt = backend
        .as_generation()
        .tokenize(&prompt_text)
        .map_err(|e| anyhow!("tokenizing prompt: {e}"))?;
    let ctx = ConditioningContext {
        context_id: resolved.context.clone(),
    };
    let decider_box = decider.as_ref().map(|d| d.fresh());
    let backends = Backends {
        generation: backend.as_generation(),
        scoring: Some(scoring.as_scoring()),
        decider: decider_box.as_deref(),
    };
    let trace = ecrd::decode(&prompt, &ctx, &resolved.config, &backends).map_err(usage_engine)?;

    if let Some(path) = &args.trace_out {
        ecrd::trace::write_jsonl(path, &trace)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{}", trace.final_text);
    println!(
        "tokens={} decider_calls={} wall_time_s={:.6}",
        trace.totals.tokens, trace.totals.decider_calls, trace.totals.wall_time_s
    );
    if let Some(reason) = &trace.aborted {
        bail!("decode aborted: {reason}");
    }
    Ok(())
}

/// Engine config validation failures are usage errors; everything else is
/// a runtime failure.
fn usage_engine(err: ecrd::EngineError) -> anyhow::Error {
    use ecrd::EngineError::*;
    match &err {
        InvalidDelta(_) | InvalidMaxTokens | MissingDecider | MissingScoringBackend(_) => {
            usage(err.to_string())
        }
        _ => anyhow!(err),
    }
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let trace = ecrd::trace::read_jsonl(&args.trace)
        .with_context(|| format!("reading {}", args.trace.display()))?;
    let report = ecrd::replay(&trace, args.delta).map_err(usage_engine)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?
        }
        None => println!("{json}"),
    }
    eprintln!(
        "delta={} triggers={} steps={}",
        report.delta,
        report.trigger_count,
        report.steps.len()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let grid: Vec<f64> = if args.grid.is_empty() {
        DEFAULT_DELTA_GRID.to_vec()
    } else {
        args.grid.clone()
    };

    let report = if !args.frozen.is_empty() {
        let mut traces = Vec::with_capacity(args.frozen.len());
        for path in &args.frozen {
            traces.push(
                ecrd::trace::read_jsonl(path)
                    .with_context(|| format!("reading {}", path.display()))?,
            );
        }
        sweep_frozen(&traces, &grid)?
    } else {
        let mut resolved = resolve(&args.backend)?;
        let corpus_path = args.corpus.as_ref().expect("clap enforces corpus|frozen");
        let corpus = load_corpus(corpus_path)?;
        let backend = AnyBackend::load(&resolved.backend_spec, &resolved.remote)?;
        let scoring = AnyBackend::load(&resolved.scoring_spec, &resolved.remote)?;
        let decider = match &resolved.decider_spec {
            Some(spec) => Some(AnyDecider::load(spec, &resolved.remote)?),
            None => None,
        };
        if resolved.config.mode == DecodeMode::Ecrd && decider.is_none() {
            return Err(usage("mode ecrd requires --decider"));
        }
        resolved.config.stop_tokens =
            resolve_stops(&resolved.stop_surfaces, backend.as_generation())?;
        let factory = move || decider.as_ref().map(|d| d.fresh());
        let bindings = SweepBindings {
            generation: backend.as_generation(),
            scoring: Some(scoring.as_scoring()),
            decider_factory: &factory,
        };
        sweep_live(&corpus, &grid, &resolved.config, &bindings, args.jobs)?
    };

    let csv = report.to_csv_string();
    match &args.out {
        Some(path) => {
            std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_fit_latency(args: FitLatencyArgs) -> Result<()> {
    let observations: Vec<(f64, f64)> = if let Some(path) = &args.observations {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.to_lowercase().starts_with('r')) {
                continue;
            }
            let (r, t) = line
                .split_once(',')
                .ok_or_else(|| usage(format!("observations line {}: expected r,T", i + 1)))?;
            out.push((
                r.trim()
                    .parse()
                    .map_err(|e| usage(format!("line {}: {e}", i + 1)))?,
                t.trim()
                    .parse()
                    .map_err(|e| usage(format!("line {}: {e}", i + 1)))?,
            ));
        }
        out
    } else {
        let mut traces = Vec::with_capacity(args.traces.len());
        for path in &args.traces {
            traces.push(
                ecrd::trace::read_jsonl(path)
                    .with_context(|| format!("reading {}", path.display()))?,
            );
        }
        latency_observations(&traces)
    };

    let model = fit_latency_model(&observations)?;
    let json = serde_json::to_string_pretty(&model)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?
        }
        None => println!("{json}"),
    }
    eprintln!(
        "t0={:.6} l0={:.6} rms_residual={:.6} n={}",
        model.t0, model.l0, model.rms_residual, model.observations
    );
    Ok(())
}
