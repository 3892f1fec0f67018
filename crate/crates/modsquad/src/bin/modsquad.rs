//! Command-line entry point: train / prune / analyze / finetune-router /
//! grad-check over a JSON run configuration.
//!
//! Exit codes: 0 ok, 1 check failure, 2 usage/config error, 3 numeric abort.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use modsquad::analysis;
use modsquad::checkpoint::{load_checkpoint, save_checkpoint};
use modsquad::config::RunConfig;
use modsquad::data::{Split, SyntheticBenchmark, TaskKind};
use modsquad::error::ModSquadError;
use modsquad::gradcheck::grad_check;
use modsquad::prune::{prune_threshold, prune_top_share, usage_frequency};
use modsquad::train::{
    evaluate, extend_for_task, finetune_new_task, train, FinetuneMode,
};

#[derive(Parser)]
#[command(name = "modsquad", version, about = "Task-conditioned MoE trainer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NewTaskKind {
    Regression,
    Classification,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the synthetic benchmark and write checkpoint, logs, and CSVs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dotted-path config overrides, e.g. --set train.epochs=5
        #[arg(long = "set")]
        set: Vec<String>,
        /// Shorthand for --set train.epochs=N
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Extract a standalone single-task sub-model from a checkpoint.
    Prune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: usize,
        /// Threshold policy: remove experts with usage below theta.
        #[arg(long)]
        theta: Option<f64>,
        /// Keep-top policy: retain the top H% most-used experts per layer.
        #[arg(long)]
        top: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export task-similarity and usage heatmaps plus an MI summary.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add a new task and fine-tune its routers and head (experts frozen).
    FinetuneRouter {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Task group the new task joins.
        #[arg(long, default_value_t = 0)]
        group: usize,
        #[arg(long, value_enum, default_value_t = NewTaskKind::Regression)]
        kind: NewTaskKind,
        /// Train only the new head (comparison baseline).
        #[arg(long)]
        head_only: bool,
        #[arg(long)]
        epochs: Option<usize>,
        /// Seed tag for the new task's data and initialization.
        #[arg(long, default_value_t = 1)]
        task_seed: u64,
    },
    /// Finite-difference gradient verification on a tiny forced model.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        /// Test hook: corrupt the named parameter's analytic gradient.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn exit_code_for(err: &ModSquadError) -> u8 {
    match err {
        ModSquadError::Config(_) | ModSquadError::UnknownTask { .. } => 2,
        ModSquadError::NanLoss { .. } => 3,
        _ => 1,
    }
}

fn load_config(path: &Path, sets: &[String]) -> Result<RunConfig, ModSquadError> {
    let mut cfg = RunConfig::load(path)?;
    if let Ok(seed) = std::env::var("MODSQUAD_SEED") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| ModSquadError::Config(format!("MODSQUAD_SEED '{seed}' is not a u64")))?;
        cfg.seed = seed;
    }
    for kv in sets {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(config: &Path, out: &Path, sets: &[String]) -> Result<(), ModSquadError> {
    let cfg = load_config(config, sets)?;
    fs::create_dir_all(out)?;
    let mut log = fs::File::create(out.join("train_log.jsonl"))?;
    let result = train(&cfg, Some(&mut log))?;
    save_checkpoint(&result.model, &out.join("checkpoint"), None)?;

    let report = evaluate(&result.model, &result.bench, Split::Test, cfg.loss.gate_stats)?;
    analysis::export_heatmaps(&report.usage, &result.model, &out.join("usage"))?;
    let metrics = serde_json::json!({
        "final_train_loss": result.loss_history.last(),
        "per_task": report
            .per_task
            .iter()
            .map(|t| serde_json::json!({
                "task": t.task,
                "loss": t.loss,
                "accuracy": t.accuracy,
            }))
            .collect::<Vec<_>>(),
        "mean_normalized_mi": report.usage.mean_normalized_mi()?,
    });
    fs::write(out.join("metrics.json"), serde_json::to_vec_pretty(&metrics)?)?;
    println!("trained {} steps; metrics in {}", result.loss_history.len(), out.display());
    Ok(())
}

fn cmd_prune(
    ckpt: &Path,
    config: &Path,
    task: usize,
    theta: Option<f64>,
    top: Option<f64>,
    out: &Path,
) -> Result<(), ModSquadError> {
    let cfg = load_config(config, &[])?;
    let bench = SyntheticBenchmark::with_seed(&cfg.data, cfg.seed);
    let (model, _) = load_checkpoint(ckpt)?;
    if task >= model.config.n_tasks {
        return Err(ModSquadError::UnknownTask { task, n_tasks: model.config.n_tasks });
    }
    let usage = usage_frequency(&model, &bench, Split::Test)?;
    let (spec, pruned) = match (theta, top) {
        (Some(t), None) => prune_threshold(&model, &usage, task, t)?,
        (None, Some(h)) => prune_top_share(&model, &usage, task, h)?,
        _ => {
            return Err(ModSquadError::Config(
                "exactly one of --theta or --top is required".into(),
            ))
        }
    };
    fs::create_dir_all(out)?;
    save_checkpoint(&pruned, &out.join("pruned_checkpoint"), Some(&spec))?;
    fs::write(out.join("pruned_spec.json"), serde_json::to_vec_pretty(&spec)?)?;
    let report = modsquad::prune::verify_equivalence(&model, &pruned, task, &bench, Split::Test)?;
    fs::write(out.join("equivalence.json"), serde_json::to_vec_pretty(&report)?)?;
    println!(
        "pruned task {task}: max_abs_output_diff={:.3e}, params {} -> {}",
        report.max_abs_output_diff, report.param_count_full, report.param_count_pruned
    );
    Ok(())
}

fn cmd_analyze(ckpt: &Path, config: &Path, out: &Path) -> Result<(), ModSquadError> {
    let cfg = load_config(config, &[])?;
    let bench = SyntheticBenchmark::with_seed(&cfg.data, cfg.seed);
    let (model, _) = load_checkpoint(ckpt)?;
    fs::create_dir_all(out)?;
    let report = evaluate(&model, &bench, Split::Test, cfg.loss.gate_stats)?;
    analysis::export_heatmaps(&report.usage, &model, &out.join("usage"))?;
    let s = analysis::task_similarity(&model, &bench, 256, None)?;
    analysis::validate_similarity(&s)?;
    fs::write(out.join("task_similarity.csv"), analysis::similarity_csv(&s))?;
    let mi = analysis::mi_report(&report.usage, &model)?;
    fs::write(out.join("mi_per_layer.json"), serde_json::to_vec_pretty(&mi)?)?;
    println!("analysis written to {}", out.display());
    Ok(())
}

fn cmd_finetune(
    ckpt: &Path,
    config: &Path,
    out: &Path,
    group: usize,
    kind: NewTaskKind,
    head_only: bool,
    epochs: Option<usize>,
    task_seed: u64,
) -> Result<(), ModSquadError> {
    let cfg = load_config(config, &[])?;
    let mut bench = SyntheticBenchmark::with_seed(&cfg.data, cfg.seed);
    let (mut model, _) = load_checkpoint(ckpt)?;
    if group >= cfg.data.n_groups {
        return Err(ModSquadError::Config(format!(
            "group {group} out of range 0..{}",
            cfg.data.n_groups
        )));
    }
    let kind = match kind {
        NewTaskKind::Regression => TaskKind::Regression,
        NewTaskKind::Classification => TaskKind::Classification,
    };
    let new_task = bench.add_task(group, kind, task_seed);
    extend_for_task(&mut model, bench.head_dims()[new_task], task_seed);
    let mode = if head_only { FinetuneMode::HeadOnly } else { FinetuneMode::RouterAndHead };
    let mut ft_cfg = cfg.train.clone();
    if let Some(e) = epochs {
        ft_cfg.epochs = e;
    }
    let result = finetune_new_task(&mut model, &bench, new_task, mode, &ft_cfg, cfg.seed)?;
    fs::create_dir_all(out)?;
    save_checkpoint(&model, &out.join("extended_checkpoint"), None)?;
    let summary = serde_json::json!({
        "new_task": new_task,
        "mode": if head_only { "head_only" } else { "router_and_head" },
        "steps": result.train_losses.len(),
        "final_train_loss": result.train_losses.last(),
        "test_loss": result.test_loss,
    });
    fs::write(out.join("finetune.json"), serde_json::to_vec_pretty(&summary)?)?;
    println!("fine-tuned task {new_task}: test_loss={:.6}", result.test_loss);
    Ok(())
}

fn cmd_grad_check(
    config: Option<&Path>,
    sets: &[String],
    inject_fault: Option<&str>,
) -> Result<bool, ModSquadError> {
    let mut cfg = match config {
        Some(p) => load_config(p, sets)?,
        None => {
            let mut c = RunConfig::grad_check_default();
            for kv in sets {
                c.apply_override(kv)?;
            }
            c
        }
    };
    if let Ok(seed) = std::env::var("MODSQUAD_SEED") {
        cfg.seed = seed
            .parse()
            .map_err(|_| ModSquadError::Config(format!("MODSQUAD_SEED '{seed}' is not a u64")))?;
    }
    let report = grad_check(&cfg, inject_fault);
    for (group, err) in &report.groups {
        println!("{group}: worst rel err {err:.3e}");
    }
    let passed = report.passed(1e-4);
    if passed {
        println!("grad-check passed (worst {:.3e} at {})", report.worst, report.worst_param);
    } else {
        eprintln!("grad-check FAILED: worst {:.3e} at {}", report.worst, report.worst_param);
    }
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train { config, out, set, epochs } => {
            let mut sets = set.clone();
            if let Some(e) = epochs {
                sets.push(format!("train.epochs={e}"));
            }
            cmd_train(config, out, &sets)
        }
        Cmd::Prune { ckpt, config, task, theta, top, out } => {
            cmd_prune(ckpt, config, *task, *theta, *top, out)
        }
        Cmd::Analyze { ckpt, config, out } => cmd_analyze(ckpt, config, out),
        Cmd::FinetuneRouter { ckpt, config, out, group, kind, head_only, epochs, task_seed } => {
            cmd_finetune(ckpt, config, out, *group, *kind, *head_only, *epochs, *task_seed)
        }
        Cmd::GradCheck { config, set, inject_fault } => {
            return match cmd_grad_check(config.as_deref(), set, inject_fault.as_deref()) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(1),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(exit_code_for(&e))
                }
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
