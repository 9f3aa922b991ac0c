//! The `patchtrace` command line.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
//! Flags take precedence over environment variables, which take precedence
//! over built-in defaults.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use patchtrace_core::aggregate::Method;
use patchtrace_core::reasoner::{train, Example, HeadMode, Reasoner, ReasonerConfig, TrainHyper};
use patchtrace_core::rng::derive_seed;
use patchtrace_core::sampler::{build_trace_seeded, build_traces};
use patchtrace_core::prompt::build_prompt_for_trace;
use patchtrace_core::{ConfidenceSource, PosteriorKind, PredictionRecord, TraceConfig};

use crate::checkpoint::{checkpoint_path, load_checkpoint, save_checkpoint, Checkpoint};
use crate::curve::{self, evaluate, CurveSpec, LlmSettings, DEFAULT_TEMP_GRID, DEFAULT_T_GRID};
use crate::error::{Error, Result};
use crate::ingest::{load_dataset, synth_generate, write_dataset, Dataset, SynthConfig, DEFAULT_PATCH_MS};
use crate::llm::{llm_predict, write_transcript, Endpoint, LlmClient, RetryPolicy};
use crate::preds::{read_predictions, write_predictions};
use crate::traces::{read_traces, write_traces};

#[derive(Debug, Parser)]
#[command(name = "patchtrace", version, about = "Sample patch posteriors into reasoning traces and measure test-time scaling")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic posterior dataset.
    Synth(SynthArgs),
    /// Sample reasoning traces from a dataset.
    Trace(TraceArgs),
    /// Turn traces into predictions with a voting rule, a trained reasoner or the mean-posterior baseline.
    Aggregate(AggregateArgs),
    /// Train the frozen-backbone reasoner for one (P, T) configuration.
    TrainReasoner(TrainArgs),
    /// Score a predictions file against a dataset.
    Eval(EvalArgs),
    /// Sweep methods over sampling lengths and temperatures.
    Curve(CurveArgs),
    /// Print the reasoning prompt for one clip.
    Prompt(PromptArgs),
    /// Ask a chat-completion model to classify every clip.
    LlmEval(LlmEvalArgs),
}

fn parse_kind(s: &str) -> std::result::Result<PosteriorKind, String> {
    PosteriorKind::parse(s).ok_or_else(|| format!("expected softmax or sigmoid, got {s:?}"))
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
        format!("unknown method {s:?} (expected one of {})", names.join(", "))
    })
}

fn parse_confidence(s: &str) -> std::result::Result<ConfidenceSource, String> {
    match s {
        "pre" => Ok(ConfidenceSource::PreTemperature),
        "post" => Ok(ConfidenceSource::PostTemperature),
        _ => Err(format!("expected pre or post, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub clips: usize,
    #[arg(long, default_value_t = 50)]
    pub categories: usize,
    #[arg(long, default_value_t = 10)]
    pub patches: usize,
    /// Label signal at the first patch.
    #[arg(long, default_value_t = 0.5)]
    pub a0: f64,
    /// Label signal at the last patch.
    #[arg(long, default_value_t = 3.0)]
    pub a1: f64,
    /// Logit noise scale.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value = "softmax", value_parser = parse_kind)]
    pub kind: PosteriorKind,
    #[arg(long, default_value_t = 1)]
    pub labels_per_clip: usize,
    #[arg(long, default_value = "synth")]
    pub name: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Trace sampling settings shared by several subcommands.
#[derive(Debug, Args)]
pub struct SamplingArgs {
    /// Samples drawn per patch.
    #[arg(long = "T", default_value_t = 1)]
    pub samples: usize,
    /// Sampling temperature.
    #[arg(long, default_value_t = 1.0)]
    pub temp: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Patch duration in milliseconds.
    #[arg(long, default_value_t = DEFAULT_PATCH_MS)]
    pub patch_ms: u32,
    /// Report the pre- or post-temperature probability as confidence.
    #[arg(long, default_value = "pre", value_parser = parse_confidence)]
    pub confidence: ConfidenceSource,
}

impl SamplingArgs {
    fn config(&self, ds: &Dataset) -> Result<TraceConfig> {
        Ok(TraceConfig::new(ds.num_patches, self.samples, self.temp, self.patch_ms, ds.kind)?.with_confidence(self.confidence))
    }
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Dataset directory or its dataset.json.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Output traces.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Traces file; not used by mean_posterior.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    /// Dataset the traces came from. Required for mean_posterior; otherwise
    /// it selects score vectors for multi-label data and supplies the kind.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Emit score vectors even for single-label data.
    #[arg(long)]
    pub scores: bool,
    /// Checkpoint for nn_reasoner.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PATCH_MS)]
    pub patch_ms: u32,
    /// Output preds.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr_start: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub lr_end: f64,
    /// Independent traces sampled per training clip.
    #[arg(long, default_value_t = 1)]
    pub resamples: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub head_layers: usize,
    /// Directory receiving reasoner_P{P}_T{T}.json.
    #[arg(long, default_value = ".")]
    pub checkpoint_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

/// Chat-completion endpoint flags.
#[derive(Debug, Args)]
pub struct EndpointArgs {
    #[arg(long, env = "PATCHTRACE_BASE_URL")]
    pub base_url: Option<String>,
    #[arg(long, env = "PATCHTRACE_MODEL")]
    pub model: Option<String>,
    /// Concurrent requests.
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 120.0)]
    pub timeout: f64,
    /// Decoding temperature sent to the model.
    #[arg(long, default_value_t = 0.0)]
    pub request_temperature: f64,
    #[arg(long, default_value_t = 3)]
    pub max_attempts: u32,
    /// Wait before the first retry, in seconds; doubles on each retry.
    #[arg(long, default_value_t = 1.0)]
    pub backoff: f64,
}

impl EndpointArgs {
    fn configured(&self) -> bool {
        self.base_url.is_some() && self.model.is_some()
    }

    fn client(&self) -> Result<LlmClient> {
        let (Some(url), Some(model)) = (&self.base_url, &self.model) else {
            return Err(Error::EndpointUnconfigured);
        };
        let secs = |v: f64, what: &str| {
            Duration::try_from_secs_f64(v).map_err(|_| Error::Usage(format!("invalid {what} {v}")))
        };
        let mut endpoint = Endpoint::new(url, model).with_env_key();
        endpoint.timeout = secs(self.timeout, "timeout")?;
        endpoint.request_temperature = self.request_temperature;
        let retry = RetryPolicy {
            max_attempts: self.max_attempts,
            initial_backoff: secs(self.backoff, "backoff")?,
        };
        LlmClient::new(endpoint, retry)
    }
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "mean_posterior,majority,weighted")]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',')]
    pub t_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub temp_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_PATCH_MS)]
    pub patch_ms: u32,
    #[arg(long, default_value = "pre", value_parser = parse_confidence)]
    pub confidence: ConfidenceSource,
    /// Directory of reasoner checkpoints for nn_reasoner.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    /// Worker threads.
    #[arg(long, env = "PATCHTRACE_JOBS")]
    pub jobs: Option<usize>,
    /// Output curve.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Clip id.
    #[arg(long)]
    pub clip: String,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Args)]
pub struct LlmEvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    /// Output preds.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Output transcript, one JSON record per clip.
    #[arg(long)]
    pub transcript: PathBuf,
}

/// Parses `argv` (including the program name), runs the command and returns the exit status.
pub fn dispatch<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().ansi().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    1
                }
            };
        }
    };
    match run(cli.command, stdout) {
        Ok(()) => 0,
        Err(Error::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}\n\nFor more information, try '--help'.");
            1
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            2
        }
    }
}

fn load(path: &Path) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    log::info!("loaded {} clips, P={}, C={}", ds.clips.len(), ds.num_patches, ds.num_categories());
    Ok(ds)
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(command: Command, stdout: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a, stdout),
        Command::Trace(a) => cmd_trace(a),
        Command::Aggregate(a) => cmd_aggregate(a),
        Command::TrainReasoner(a) => cmd_train(a, stdout),
        Command::Eval(a) => cmd_eval(a, stdout),
        Command::Curve(a) => cmd_curve(a),
        Command::Prompt(a) => cmd_prompt(a, stdout),
        Command::LlmEval(a) => cmd_llm_eval(a),
    }
}

fn cmd_synth(a: SynthArgs, stdout: &mut dyn Write) -> Result<()> {
    let cfg = SynthConfig {
        num_categories: a.categories,
        num_patches: a.patches,
        num_clips: a.clips,
        a0: a.a0,
        a1: a.a1,
        noise: a.noise,
        kind: a.kind,
        labels_per_clip: a.labels_per_clip,
    };
    let synth = synth_generate(&cfg, a.seed)?;
    let ds = Dataset::from_synth(a.name, &cfg, synth);
    let manifest = write_dataset(&ds, &a.out)?;
    let _ = writeln!(stdout, "{}", manifest.display());
    Ok(())
}

fn cmd_trace(a: TraceArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let cfg = a.sampling.config(&ds)?;
    let traces = build_traces(&ds.clips, &cfg, a.sampling.seed)?;
    write_traces(&a.out, &traces, ds.num_categories())
}

fn cmd_aggregate(a: AggregateArgs) -> Result<()> {
    let ds = a.data.as_deref().map(load).transpose()?;
    let preds: Vec<PredictionRecord> = if a.method == Method::MeanPosterior {
        let ds = ds.ok_or_else(|| Error::Usage("mean_posterior needs --data".into()))?;
        curve::mean_posterior_all(&ds)?
    } else {
        let path = a.traces.ok_or_else(|| Error::Usage(format!("{} needs --traces", a.method.as_str())))?;
        let kind = ds.as_ref().map_or(PosteriorKind::Softmax, |d| d.kind);
        let file = read_traces(&path, kind, a.patch_ms)?;
        if let Some(d) = &ds {
            if file.num_categories != d.num_categories() && !file.traces.is_empty() {
                return Err(Error::InconsistentShape(format!(
                    "traces encode {} categories, dataset has {}",
                    file.num_categories,
                    d.num_categories()
                )));
            }
        }
        let multi = a.scores || ds.as_ref().is_some_and(|d| !d.is_single_label());
        match a.method {
            Method::Majority | Method::Weighted => file
                .traces
                .iter()
                .map(|t| {
                    let p = patchtrace_core::aggregate::aggregate_trace(t, a.method, file.num_categories, multi)?;
                    Ok(PredictionRecord::new(t.clip_id(), a.method.as_str(), p))
                })
                .collect::<Result<_>>()?,
            Method::NnReasoner => {
                let path = a.checkpoint.ok_or_else(|| Error::Usage("nn_reasoner needs --checkpoint".into()))?;
                let ck = load_checkpoint(&path)?;
                curve::reasoner_all(&ck, &file.traces)?
            }
            Method::LlmReasoner => {
                return Err(Error::Usage("llm_reasoner runs through the llm-eval subcommand".into()))
            }
            Method::MeanPosterior => unreachable!(),
        }
    };
    write_predictions(&a.out, &preds)
}

fn cmd_train(a: TrainArgs, stdout: &mut dyn Write) -> Result<()> {
    let ds = load(&a.data)?;
    let cfg = a.sampling.config(&ds)?;
    if a.resamples == 0 {
        return Err(Error::Usage("--resamples must be at least 1".into()));
    }
    let head_mode = if ds.is_single_label() { HeadMode::SoftmaxCe } else { HeadMode::SigmoidBce };
    let model_cfg = ReasonerConfig {
        d_model: a.d_model,
        n_layers: a.layers,
        n_heads: a.heads,
        head_layers: a.head_layers,
        init_seed: derive_seed(a.sampling.seed, &[0]),
        ..ReasonerConfig::new(ds.num_categories(), cfg.seq_len(), head_mode)
    };
    let mut model = Reasoner::new(model_cfg)?;
    let mut examples = Vec::with_capacity(ds.clips.len() * a.resamples);
    for r in 0..a.resamples {
        let traces = build_traces(&ds.clips, &cfg, derive_seed(a.sampling.seed, &[1, r as u64]))?;
        for (t, clip) in traces.iter().zip(&ds.clips) {
            examples.push(Example::from_trace(t, ds.num_categories(), clip.labels.clone()));
        }
    }
    let hyper = TrainHyper {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr_start: a.lr_start,
        lr_end: a.lr_end,
        train_seed: derive_seed(a.sampling.seed, &[2]),
        ..TrainHyper::default()
    };
    let log = train(&mut model, &examples, &hyper)?;
    if let (Some(first), Some(last)) = (log.epoch_loss.first(), log.epoch_loss.last()) {
        log::info!("loss {first:.4} -> {last:.4} over {} steps", log.steps);
    }
    std::fs::create_dir_all(&a.checkpoint_dir).map_err(|e| Error::io(&a.checkpoint_dir, e))?;
    let path = checkpoint_path(&a.checkpoint_dir, ds.num_patches, a.sampling.samples);
    save_checkpoint(
        &path,
        &Checkpoint {
            model,
            patches: ds.num_patches,
            samples_per_patch: a.sampling.samples,
            temperature: a.sampling.temp,
        },
    )?;
    let _ = writeln!(stdout, "{}", path.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let ds = load(&a.data)?;
    let preds = read_predictions(&a.preds)?;
    let _ = writeln!(stdout, "method,metric_name,metric_value,n_clips,n_unscored");
    // methods in order of first appearance
    let mut seen = BTreeSet::new();
    for p in &preds {
        let m = p.method.as_str();
        if !seen.insert(m) {
            continue;
        }
        let subset: Vec<PredictionRecord> = preds.iter().filter(|r| r.method == m).cloned().collect();
        let s = evaluate(&ds, &subset)?;
        let _ = writeln!(stdout, "{m},{},{},{},{}", s.metric_name, s.value, s.n_clips, s.n_unscored);
    }
    Ok(())
}

fn cmd_curve(a: CurveArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let llm = if a.methods.contains(&Method::LlmReasoner) {
        if !a.endpoint.configured() {
            return Err(Error::EndpointUnconfigured);
        }
        Some(LlmSettings {
            client: a.endpoint.client()?,
            max_in_flight: a.endpoint.max_in_flight,
        })
    } else {
        None
    };
    let sweep = CurveSpec {
        methods: a.methods,
        t_grid: a.t_grid.unwrap_or_else(|| DEFAULT_T_GRID.to_vec()),
        temp_grid: a.temp_grid.unwrap_or_else(|| DEFAULT_TEMP_GRID.to_vec()),
        seed: a.seed,
        patch_ms: a.patch_ms,
        confidence: a.confidence,
        checkpoint_dir: a.checkpoint_dir,
        llm,
        jobs: a.jobs,
    };
    let rows = curve::run_curve(&ds, &sweep)?;
    write_out(&a.out, &curve::format_curve(&rows))
}

fn cmd_prompt(a: PromptArgs, stdout: &mut dyn Write) -> Result<()> {
    let ds = load(&a.data)?;
    let cfg = a.sampling.config(&ds)?;
    let (ordinal, clip) = ds
        .clip(&a.clip)
        .ok_or_else(|| Error::Core(patchtrace_core::CoreError::UnknownClip(a.clip.clone())))?;
    let trace = build_trace_seeded(clip, ordinal, &cfg, a.sampling.seed)?;
    let text = build_prompt_for_trace(&trace, &ds.categories)?;
    let _ = write!(stdout, "{text}");
    Ok(())
}

fn cmd_llm_eval(a: LlmEvalArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let client = a.endpoint.client()?;
    let cfg = a.sampling.config(&ds)?;
    let traces = build_traces(&ds.clips, &cfg, a.sampling.seed)?;
    let (preds, transcript) = llm_predict(&client, &traces, &ds.categories, a.endpoint.max_in_flight)?;
    write_predictions(&a.out, &preds)?;
    write_transcript(&a.transcript, &transcript)?;
    let s = evaluate(&ds, &preds)?;
    log::info!("{} = {} ({} unscored)", s.metric_name, s.value, s.n_unscored);
    Ok(())
}
