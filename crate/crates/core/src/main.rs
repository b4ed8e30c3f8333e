//! Command-line front end for the experiment harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use tokenprune::bench::{
    emit_report, evaluate_prompted, read_rows, run_arch_ablation, run_cross_dataset, run_keep_rate_sweep,
    run_location_ablation, run_tuning_grid, tune_run, ArtifactStore, ExperimentSpec, PipelineConfig,
};
use tokenprune::clipcore::zero_shot_accuracy;
use tokenprune::data::SplitRole;
use tokenprune::nncore::io::write_file;
use tokenprune::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tokenprune", version, about = "Golden-ranking token pruning experiments")]
struct Cli {
    /// JSON pipeline config; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "reports")]
    out: PathBuf,
    #[arg(long, global = true, default_value = "artifacts")]
    cache: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    GenData,
    Pretrain,
    Golden,
    TrainPredictor,
    Sweep,
    AblateLocations,
    AblateArch,
    CrossDataset,
    TunePrompts,
    TuningGrid,
    /// Re-emits summary and plot files from existing result tables.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        name: String,
    },
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    let path = dir.join(name);
    write_file(&path, text.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn emit(rows: &[tokenprune::bench::ResultRow], out: &Path, name: &str) -> Result<()> {
    let files = emit_report(rows, out, name)?;
    println!("wrote {} rows to {}", rows.len(), files.rows.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_json_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    let spec = ExperimentSpec::new(format!("{:?}", cli.command), cfg.clone());
    let store = ArtifactStore::new(&cli.cache);
    let out = cli.out.as_path();

    match cli.command {
        Command::GenData => {
            let mut report = Vec::new();
            for &seed in &spec.seeds {
                let ds = store.gen_data(&cfg, seed)?;
                let counts: Vec<_> = SplitRole::ALL
                    .iter()
                    .map(|&r| json!({"split": r.as_str(), "class_counts": ds.split(r).class_counts()}))
                    .collect();
                report.push(json!({"seed": seed, "splits": counts}));
            }
            write_json(out, "gen_data.json", &report)
        }
        Command::Pretrain => {
            let mut report = Vec::new();
            for &seed in &spec.seeds {
                let (model, log) = store.pretrain(&cfg, seed)?;
                let ds = store.load_data(&cfg, seed)?;
                let acc = zero_shot_accuracy(&model, ds.split(SplitRole::Test))?;
                report.push(json!({"seed": seed, "log": log, "zero_shot_accuracy": acc}));
            }
            write_json(out, "pretrain.json", &report)
        }
        Command::Golden => {
            let mut report = Vec::new();
            for &seed in &spec.seeds {
                let (train, test) = store.golden(&cfg, seed)?;
                let degenerate = |t: &tokenprune::golden::GoldenTable| t.scores.values().filter(|s| s.degenerate).count();
                report.push(json!({
                    "seed": seed,
                    "train_images": train.len(),
                    "test_images": test.len(),
                    "degenerate": degenerate(&train) + degenerate(&test),
                }));
            }
            write_json(out, "golden.json", &report)
        }
        Command::TrainPredictor => {
            let mut report = Vec::new();
            for &seed in &spec.seeds {
                let (_, log) = store.train_predictor(&cfg, seed)?;
                let run = store.load_run(&cfg, seed)?;
                report.push(json!({
                    "seed": seed,
                    "arch": cfg.predictor.arch,
                    "epoch_losses": log.epoch_losses,
                    "matching_rate": run.predictor_mr,
                    "match_k": cfg.match_k(),
                }));
            }
            write_json(out, "train_predictor.json", &report)
        }
        Command::Sweep => emit(&run_keep_rate_sweep(&cfg, &store.load_runs(&spec)?)?, out, "sweep"),
        Command::AblateLocations => emit(&run_location_ablation(&cfg, &store.load_runs(&spec)?)?, out, "locations"),
        Command::AblateArch => emit(&run_arch_ablation(&cfg, &store.load_runs(&spec)?)?, out, "arch"),
        Command::CrossDataset => emit(&run_cross_dataset(&cfg, &spec.seeds)?, out, "cross"),
        Command::TuningGrid => emit(&run_tuning_grid(&cfg, &store.load_runs(&spec)?)?, out, "tuning"),
        Command::TunePrompts => {
            let mode = cfg.tune.mode;
            let mut report = Vec::new();
            for run in store.load_runs(&spec)? {
                let (state, log) = tune_run(&cfg, &run, mode)?;
                store.save_prompts(&cfg, run.seed, mode, &state)?;
                let pruned = evaluate_prompted(&cfg, &run, Some((&state, mode)), true)?;
                let unpruned = evaluate_prompted(&cfg, &run, Some((&state, mode)), false)?;
                report.push(json!({
                    "seed": run.seed,
                    "mode": mode,
                    "epoch_losses": log.epoch_losses,
                    "pruned_accuracy": pruned.accuracy,
                    "unpruned_accuracy": unpruned.accuracy,
                }));
            }
            write_json(out, "tune_prompts.json", &report)
        }
        Command::Report { inputs, name } => {
            let mut rows = Vec::new();
            for p in &inputs {
                rows.extend(read_rows(p)?);
            }
            emit(&rows, out, &name)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
