use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lipvi::agent::AgentConfig;
use lipvi::diagnostics::{
    lipschitz_upper_bound, local_lipschitz_estimate, theorem2_bound_check, value_aware_model_error,
    value_lipschitz_bound,
};
use lipvi::diffcore::checkpoint::Checkpoint;
use lipvi::dynamics::{model_mse, DynamicsModel};
use lipvi::env::{evaluate_policy, TransitionDataset};
use lipvi::harness::{self, ExperimentConfig};
use lipvi::value::ActorCritic;
use lipvi::{Error, Result};

/// Model-based value iteration with Lipschitz-regularised critics.
#[derive(Parser)]
#[command(name = "lipvi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (config key `seeds`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (config key `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config key `sweep.axis`: beta, lambda, epsilon or mechanism.
    #[arg(long, global = true)]
    sweep_axis: Option<String>,
    /// Config key `sweep.values`, comma separated.
    #[arg(long, global = true)]
    sweep_values: Option<String>,
    /// Config key `seeds`, comma separated.
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Any other key, as `KEY=VALUE`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect a uniform-random dataset into OUT/dataset.csv.
    Collect,
    /// Fit the dynamics model into OUT/model.ckpt.
    TrainModel {
        /// Dataset CSV; collected afresh when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// One full run (collect, fit, value iteration) into OUT.
    TrainAgent,
    /// Roll out a trained policy.
    Evaluate {
        #[arg(long)]
        agent: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
    },
    /// Sweep one regularizer parameter over values and seeds.
    Sweep,
    /// Diagnostics of saved checkpoints on a dataset.
    Diagnose {
        #[arg(long)]
        agent: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Dataset CSV; collected afresh when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        noise_samples: usize,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.set("seeds", &s.to_string())?;
    }
    if let Some(s) = &c.seeds {
        cfg.set("seeds", s)?;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(a) = &c.sweep_axis {
        cfg.set("sweep.axis", a)?;
    }
    if let Some(v) = &c.sweep_values {
        cfg.set("sweep.values", v)?;
    }
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn dataset(cfg: &ExperimentConfig, seed: u64, path: Option<&Path>) -> Result<TransitionDataset> {
    match path {
        Some(p) => TransitionDataset::load_csv(p),
        None => harness::collect_for(cfg, seed),
    }
}

fn load_agent(path: &Path) -> Result<(lipvi::diffcore::MlpParams, lipvi::diffcore::MlpParams)> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != "agent" || ck.nets.len() != 2 {
        return Err(Error::Format {
            what: "agent checkpoint",
            detail: format!("kind `{}` with {} nets", ck.kind, ck.nets.len()),
        });
    }
    let mut nets = ck.nets.into_iter();
    Ok((nets.next().unwrap(), nets.next().unwrap()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let seed = cfg.seeds[0];
    let out = cfg.out_dir.clone();
    match cli.command {
        Command::Collect => {
            cfg.validate()?;
            mkdir(&out)?;
            let data = harness::collect_for(&cfg, seed)?;
            let path = out.join("dataset.csv");
            data.save_csv(&path)?;
            println!("wrote {} transitions to {}", data.len(), path.display());
        }
        Command::TrainModel { data } => {
            cfg.validate()?;
            mkdir(&out)?;
            let data = dataset(&cfg, seed, data.as_deref())?;
            let (model, report) = harness::train_model_for(&cfg, &data, seed)?;
            let path = out.join("model.ckpt");
            model.to_checkpoint().save(&path)?;
            match report.holdout_mse {
                Some(m) => println!("holdout mse {m}"),
                None => println!("no holdout"),
            }
            println!("wrote {}", path.display());
        }
        Command::TrainAgent => {
            let r = harness::run_single(&cfg, seed, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&r.summary)?);
        }
        Command::Evaluate { agent, episodes } => {
            let (_, policy) = load_agent(&agent)?;
            let r = evaluate_policy(&cfg.env, &policy, episodes, seed)?;
            println!("mean_return {} best_return {}", r.mean_return, r.best_return);
        }
        Command::Sweep => {
            let results = harness::run_sweep(&cfg, true)?;
            let rows = harness::emit_report(&results, &out)?;
            println!("{}", harness::SUMMARY_HEADER);
            for r in rows {
                println!(
                    "{},{},{},{},{}",
                    r.sweep_value,
                    r.median_best_return,
                    r.median_max_regression_error,
                    r.median_max_vame,
                    r.median_lip_bound
                );
            }
        }
        Command::Diagnose {
            agent,
            model,
            data,
            noise_samples,
        } => {
            let (q, policy) = load_agent(&agent)?;
            let model = DynamicsModel::from_checkpoint(Checkpoint::load(&model)?)?;
            let data = dataset(&cfg, seed, data.as_deref())?;
            let ac = ActorCritic::new(&q, &policy)?;
            let a: &AgentConfig = &cfg.agent;
            let states = data.to_batch().states;
            let local = local_lipschitz_estimate(&ac, &states, a.lip_epsilon, a.lip_pairs, seed)?;
            let vame = value_aware_model_error(&ac, &model, &data, a.gamma, noise_samples, seed)?;
            let mse = model_mse(&model, &data, noise_samples, seed)?;
            let check = theorem2_bound_check(&ac, &model, &data, a.gamma, noise_samples, seed)?;
            let report = serde_json::json!({
                "lip_upper_bound": lipschitz_upper_bound(&q),
                "value_lip_bound": value_lipschitz_bound(&ac),
                "local_lipschitz_estimate": local,
                "vame": vame,
                "model_mse": mse,
                "bound_check": {"vame": check.vame, "bound": check.bound, "holds": check.holds},
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
