//! Experiment orchestration: seeded single runs, sweeps over one
//! regularizer parameter, and CSV/JSON reports.
//!
//! A run directory holds `config.txt`, `trace.csv` (one
//! [`DiagnosticsRecord`] per iteration),
//! `timing.csv`, `summary.json` and, when enabled, `model.ckpt` and
//! `agent.ckpt`. A sweep directory additionally holds `summary.csv` and
//! `manifest.json`.

mod config;
mod report;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, SweepAxis, KEYS};
pub use report::{
    emit_report, median, read_summary_csv, read_trace_csv, spearman, summarize_sweep,
    write_trace_csv, SweepSummaryRow, SUMMARY_HEADER,
};

use crate::agent::{run_value_iteration, AgentState, DataSource, RewardSource};
use crate::diagnostics::DiagnosticsRecord;
use crate::diffcore::checkpoint::Checkpoint;
use crate::dynamics::{train_members, train_reward_model, DynamicsModel, TrainReport};
use crate::env::{collect_dataset, Behavior, TransitionDataset};
use crate::rng::mix;
use crate::{Error, Result};

/// Figures of merit of one run.
///
/// An empty trace gives `iterations = 0` and zeros elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: usize,
    /// Max over the trace of the mean evaluation return.
    pub best_return: f64,
    pub max_regression_error: f64,
    pub max_vame: f64,
    /// Critic Lipschitz upper bound after the last iteration.
    pub final_lip_bound: f64,
}

impl RunSummary {
    pub fn from_trace(trace: &[DiagnosticsRecord]) -> Self {
        let max = |f: fn(&DiagnosticsRecord) -> f64| trace.iter().map(f).fold(0.0, f64::max);
        RunSummary {
            iterations: trace.len(),
            best_return: max(|r| r.eval_return_mean),
            max_regression_error: max(|r| r.regression_error),
            max_vame: max(|r| r.vame),
            final_lip_bound: trace.last().map_or(0.0, |r| r.lip_upper_bound),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub sweep_value: Option<String>,
    pub trace: Vec<DiagnosticsRecord>,
    pub summary: RunSummary,
    pub model_holdout_mse: Option<f64>,
    /// Directory the run wrote to, if any.
    pub out_dir: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
}

/// Derived seeds of the stages of a run.
pub fn stage_seeds(seed: u64) -> (u64, u64) {
    (mix(seed, 0xDA7A), mix(seed, 0x30DE1))
}

fn stage<T>(name: &'static str, out: Option<&Path>, r: Result<T>) -> Result<T> {
    r.map_err(|e| {
        let e = Error::Stage {
            stage: name,
            source: Box::new(e),
        };
        if let Some(dir) = out {
            let _ = std::fs::write(dir.join("error.txt"), format!("{e}\n"));
        }
        e
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Collect a uniform-random dataset for `seed`.
pub fn collect_for(cfg: &ExperimentConfig, seed: u64) -> Result<TransitionDataset> {
    collect_dataset(&cfg.env, Behavior::UniformRandom, cfg.dataset_size, stage_seeds(seed).0)
}

/// Fit the configured dynamics model.
pub fn train_model_for(
    cfg: &ExperimentConfig,
    data: &TransitionDataset,
    seed: u64,
) -> Result<(DynamicsModel, TrainReport)> {
    let mcfg = cfg.model_config(stage_seeds(seed).1);
    let member_seeds: Vec<u64> = (0..cfg.ensemble_size as u64).map(|i| mix(mcfg.seed, i)).collect();
    train_members(data, &mcfg, cfg.model_variant, &member_seeds)
}

pub fn agent_checkpoint(state: &AgentState) -> Checkpoint {
    Checkpoint::new("agent", vec![state.q.clone(), state.policy.clone()])
        .with_extra(serde_json::json!({ "iteration": state.iteration }))
}

/// Collect data, fit the model, run value iteration, and persist the
/// results under `out` when given. Deterministic in `(cfg, seed)`.
pub fn run_single(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<RunResult> {
    stage("config", out, cfg.validate())?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("config.txt"), cfg.to_text())?;
    }
    let data = stage("collect", out, collect_for(cfg, seed))?;
    let (model, report) = stage("train-model", out, train_model_for(cfg, &data, seed))?;
    let reward_model = match cfg.agent.reward_source {
        RewardSource::Model => Some(stage(
            "train-reward",
            out,
            train_reward_model(&data, &cfg.model_config(mix(seed, 0x2E3A))),
        )?),
        RewardSource::Dataset => None,
    };
    let agent_cfg = crate::agent::AgentConfig {
        seed,
        ..cfg.agent.clone()
    };
    let source = DataSource {
        env: &cfg.env,
        data: &data,
        reward_model: reward_model.as_ref(),
    };
    let (state, trace) = stage("train-agent", out, run_value_iteration(&agent_cfg, &model, source))?;
    let summary = RunSummary::from_trace(&trace);
    let mut result = RunResult {
        config: cfg.clone(),
        seed,
        sweep_value: None,
        trace,
        summary,
        model_holdout_mse: report.holdout_mse,
        out_dir: out.map(Path::to_path_buf),
        checkpoints: Vec::new(),
    };
    if let Some(dir) = out {
        if cfg.save_checkpoints {
            let m = dir.join("model.ckpt");
            model.to_checkpoint().save(&m)?;
            let a = dir.join("agent.ckpt");
            agent_checkpoint(&state).save(&a)?;
            result.checkpoints = vec![m, a];
        }
        persist_run(&result, dir)?;
    }
    Ok(result)
}

/// Write `trace.csv`, `timing.csv` and `summary.json` into `dir`.
pub fn persist_run(result: &RunResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_trace_csv(&dir.join("trace.csv"), &result.trace)?;
    let mut timing = String::from("iteration,wall_time_s\n");
    for r in &result.trace {
        timing.push_str(&format!("{},{}\n", r.iteration, r.wall_time_s));
    }
    write(&dir.join("timing.csv"), timing)?;
    let summary = serde_json::json!({
        "seed": result.seed,
        "sweep_value": result.sweep_value,
        "summary": result.summary,
        "model_holdout_mse": result.model_holdout_mse,
        "checkpoints": result.checkpoints,
    });
    write(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)
}

/// Worker count for sweeps: `LIPVI_THREADS` if set, else the number of
/// available cores.
pub fn sweep_threads() -> usize {
    std::env::var("LIPVI_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Directory of one sweep point.
pub fn point_dir(root: &Path, axis: SweepAxis, value: &str, seed: u64) -> PathBuf {
    root.join(format!("{}_{value}", axis.as_str()))
        .join(format!("seed_{seed}"))
}

/// Every sweep value crossed with every seed, in value-major order. Runs
/// execute on up to [`sweep_threads`] workers, each in its own directory
/// under `cfg.out_dir` (when `persist`).
pub fn run_sweep(cfg: &ExperimentConfig, persist: bool) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let axis = cfg
        .sweep_axis
        .ok_or_else(|| Error::Config("sweep.axis is not set".into()))?;
    let points: Vec<(String, u64)> = cfg
        .sweep_values
        .iter()
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v.clone(), s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep_threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        points
            .par_iter()
            .map(|(value, seed)| {
                let point = cfg.with_sweep_value(value)?;
                let dir = persist.then(|| point_dir(&cfg.out_dir, axis, value, *seed));
                let mut r = run_single(&point, *seed, dir.as_deref())?;
                r.sweep_value = Some(value.clone());
                if let Some(d) = &dir {
                    persist_run(&r, d)?;
                }
                Ok(r)
            })
            .collect()
    })
}
