//! Scoring and the test-time scaling sweep behind `curve.csv`.

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;

use patchtrace_core::aggregate::{aggregate_trace, mean_posterior_baseline, mean_posterior_scores, Method};
use patchtrace_core::metrics::{macro_auc, top1_accuracy};
use patchtrace_core::reasoner::predict;
use patchtrace_core::rng::derive_seed;
use patchtrace_core::sampler::build_traces;
use patchtrace_core::{ConfidenceSource, Prediction, PredictionRecord, ReasoningTrace, TraceConfig};

use crate::checkpoint::{checkpoint_path, load_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::ingest::{Dataset, DEFAULT_PATCH_MS};
use crate::llm::{llm_predict, LlmClient};

pub const DEFAULT_T_GRID: [usize; 5] = [1, 2, 4, 16, 32];
pub const DEFAULT_TEMP_GRID: [f64; 4] = [1.0, 1.2, 1.5, 2.0];
pub const CURVE_HEADER: &str = "method,temperature,T,metric_name,metric_value,n_clips,n_unscored";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub metric_name: &'static str,
    pub value: f64,
    pub n_clips: usize,
    pub n_unscored: usize,
}

/// Top-1 accuracy for single-label softmax data, macro ROC AUC otherwise.
pub fn evaluate(dataset: &Dataset, preds: &[PredictionRecord]) -> Result<Score> {
    for p in preds {
        p.validate(dataset.num_categories())?;
    }
    if dataset.is_single_label() {
        let r = top1_accuracy(preds, &dataset.clips)?;
        Ok(Score {
            metric_name: "top1_accuracy",
            value: r.accuracy,
            n_clips: r.n_clips,
            n_unscored: r.n_unscored,
        })
    } else {
        let r = macro_auc(preds, &dataset.clips, dataset.num_categories())?;
        Ok(Score {
            metric_name: "macro_auc",
            value: r.macro_auc,
            n_clips: r.n_clips,
            n_unscored: r.n_unscored,
        })
    }
}

/// Predictions of a trace-counting method (`majority`, `weighted`).
pub fn aggregate_all(dataset: &Dataset, traces: &[ReasoningTrace], method: Method) -> Result<Vec<PredictionRecord>> {
    let multi = !dataset.is_single_label();
    traces
        .iter()
        .map(|t| {
            let p = aggregate_trace(t, method, dataset.num_categories(), multi)?;
            Ok(PredictionRecord::new(t.clip_id(), method.as_str(), p))
        })
        .collect()
}

/// The patch-mean baseline: a category for single-label data, the mean row otherwise.
pub fn mean_posterior_all(dataset: &Dataset) -> Result<Vec<PredictionRecord>> {
    let multi = !dataset.is_single_label();
    dataset
        .clips
        .iter()
        .map(|c| {
            let p = if multi {
                Prediction::Scores(mean_posterior_scores(c)?)
            } else {
                Prediction::Category(mean_posterior_baseline(c)?)
            };
            Ok(PredictionRecord::new(&c.clip_id, Method::MeanPosterior.as_str(), p))
        })
        .collect()
}

pub fn reasoner_all(ck: &Checkpoint, traces: &[ReasoningTrace]) -> Result<Vec<PredictionRecord>> {
    traces.par_iter().map(|t| Ok(predict(&ck.model, t)?)).collect()
}

pub struct LlmSettings {
    pub client: LlmClient,
    pub max_in_flight: usize,
}

pub struct CurveSpec {
    pub methods: Vec<Method>,
    pub t_grid: Vec<usize>,
    pub temp_grid: Vec<f64>,
    pub seed: u64,
    pub patch_ms: u32,
    pub confidence: ConfidenceSource,
    /// Where `reasoner_P{P}_T{T}.json` files live; needed for `nn_reasoner`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Needed for `llm_reasoner`.
    pub llm: Option<LlmSettings>,
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
}

impl CurveSpec {
    pub fn new(methods: Vec<Method>, seed: u64) -> Self {
        Self {
            methods,
            t_grid: DEFAULT_T_GRID.to_vec(),
            temp_grid: DEFAULT_TEMP_GRID.to_vec(),
            seed,
            patch_ms: DEFAULT_PATCH_MS,
            confidence: ConfidenceSource::PreTemperature,
            checkpoint_dir: None,
            llm: None,
            jobs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub method: Method,
    /// Empty for `mean_posterior`, which does not sample.
    pub cell: Option<(f64, usize)>,
    pub score: Score,
}

/// Seed of the traces for temperature index `tau_index` and sampling length `t`.
pub fn cell_seed(seed: u64, tau_index: usize, t: usize) -> u64 {
    derive_seed(seed, &[tau_index as u64, t as u64])
}

fn run_cell(
    dataset: &Dataset,
    sweep: &CurveSpec,
    method: Method,
    tau_index: usize,
    t: usize,
    checkpoint: Option<&Checkpoint>,
) -> Result<Score> {
    let tau = sweep.temp_grid[tau_index];
    let cfg = TraceConfig::new(dataset.num_patches, t, tau, sweep.patch_ms, dataset.kind)?.with_confidence(sweep.confidence);
    let traces = build_traces(&dataset.clips, &cfg, cell_seed(sweep.seed, tau_index, t))?;
    let preds = match method {
        Method::Majority | Method::Weighted => aggregate_all(dataset, &traces, method)?,
        Method::NnReasoner => reasoner_all(checkpoint.expect("checkpoint loaded"), &traces)?,
        Method::LlmReasoner => {
            let llm = sweep.llm.as_ref().ok_or(Error::EndpointUnconfigured)?;
            llm_predict(&llm.client, &traces, &dataset.categories, llm.max_in_flight)?.0
        }
        Method::MeanPosterior => unreachable!("mean_posterior has no grid cells"),
    };
    evaluate(dataset, &preds)
}

/// Runs every `(method, temperature, T)` cell. Rows follow the method order,
/// then temperature, then `T`; `mean_posterior` contributes a single row.
pub fn run_curve(dataset: &Dataset, sweep: &CurveSpec) -> Result<Vec<CurveRow>> {
    if sweep.t_grid.is_empty() || sweep.t_grid.contains(&0) {
        return Err(Error::Usage("T grid must be non-empty and positive".into()));
    }
    if sweep.temp_grid.is_empty() || sweep.temp_grid.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::Usage("temperature grid must be non-empty and positive".into()));
    }
    if sweep.methods.contains(&Method::LlmReasoner) && sweep.llm.is_none() {
        return Err(Error::EndpointUnconfigured);
    }

    // load every checkpoint before doing any work
    let mut checkpoints = Vec::new();
    if sweep.methods.contains(&Method::NnReasoner) {
        for &t in &sweep.t_grid {
            let missing = Error::MissingCheckpoint {
                patches: dataset.num_patches,
                samples_per_patch: t,
            };
            let dir = sweep.checkpoint_dir.as_ref().ok_or(missing)?;
            let path = checkpoint_path(dir, dataset.num_patches, t);
            if !path.is_file() {
                return Err(Error::MissingCheckpoint {
                    patches: dataset.num_patches,
                    samples_per_patch: t,
                });
            }
            let ck = load_checkpoint(&path)?;
            if ck.model.config().num_categories != dataset.num_categories() {
                return Err(Error::Checkpoint(format!(
                    "{} has {} categories, dataset has {}",
                    path.display(),
                    ck.model.config().num_categories,
                    dataset.num_categories()
                )));
            }
            checkpoints.push((t, ck));
        }
    }
    let checkpoint_for = |t: usize| checkpoints.iter().find(|(k, _)| *k == t).map(|(_, c)| c);

    let mut cells: Vec<(Method, Option<(usize, usize)>)> = Vec::new();
    for &m in &sweep.methods {
        if m == Method::MeanPosterior {
            cells.push((m, None));
            continue;
        }
        for tau_index in 0..sweep.temp_grid.len() {
            for &t in &sweep.t_grid {
                cells.push((m, Some((tau_index, t))));
            }
        }
    }

    let compute = || -> Result<Vec<CurveRow>> {
        cells
            .par_iter()
            .map(|&(method, cell)| {
                let score = match cell {
                    None => evaluate(dataset, &mean_posterior_all(dataset)?)?,
                    Some((tau_index, t)) => run_cell(dataset, sweep, method, tau_index, t, checkpoint_for(t))?,
                };
                log::debug!("{} {:?}: {}", method.as_str(), cell, score.value);
                Ok(CurveRow {
                    method,
                    cell: cell.map(|(i, t)| (sweep.temp_grid[i], t)),
                    score,
                })
            })
            .collect()
    };
    match sweep.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Usage(e.to_string()))?
            .install(compute),
        None => compute(),
    }
}

/// CSV text for `curve.csv`. Temperatures print with at least one decimal (`1.0`, `1.2`).
pub fn format_curve(rows: &[CurveRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        let (temp, t) = match r.cell {
            Some((tau, t)) => (format!("{tau:?}"), t.to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.method.as_str(),
            temp,
            t,
            r.score.metric_name,
            r.score.value,
            r.score.n_clips,
            r.score.n_unscored
        );
    }
    out
}
