//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clap::Args;
use ptpm::checkpoint::Checkpoint;
use ptpm::config::RunConfig;
use ptpm::data::{self, Dataset, SynthConfig};
use ptpm::experiment::{self, EvalSummary, Method};
use ptpm::tpm::PredictMode;
use ptpm::{Error, Result};

fn load_run_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
}

/// Evaluation mode a checkpoint naturally serves in.
fn natural_mode(cfg: &RunConfig) -> PredictMode {
    if cfg.enable_tsl {
        PredictMode::Pruned
    } else {
        PredictMode::Global
    }
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Generator settings (JSON `SynthConfig`); defaults to the built-in
    /// two-cluster benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Override the generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the sample count.
    #[arg(long)]
    n: Option<usize>,
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n {
        cfg.n_samples = n;
    }
    let dataset = data::gen_synthetic(&cfg)?;
    data::save_csv(&dataset, &args.out)?;
    println!(
        "wrote {} samples x {} features to {}",
        dataset.len(),
        dataset.feature_dim,
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run settings (JSON `RunConfig`); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training CSV; overrides `train_data` from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint output path; metrics land next to it as
    /// `<out>.metrics.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = load_run_config(&args.config, args.seed)?;
    let train_path = args
        .data
        .clone()
        .or_else(|| cfg.train_data.clone())
        .ok_or_else(|| Error::config("no training data: pass --data or set train_data"))?;
    let train_set = data::load_csv(&train_path)?;

    let (trainer, tree, history) = experiment::train_tree_model(&train_set, &cfg)?;
    Checkpoint::capture(&trainer, &tree).save(&args.out)?;

    // Metrics on the held-out set when configured, else on the train set.
    let eval_set = match &cfg.test_data {
        Some(p) => data::load_csv(p)?,
        None => train_set,
    };
    let summary =
        experiment::evaluate_tree_model(&trainer.net, &tree, &cfg, &eval_set, natural_mode(&cfg))?;
    let metrics_path = metrics_path_for(&args.out);
    write_json(&summary, &metrics_path)?;

    let last = history.last().expect("at least one epoch");
    println!(
        "trained {} epochs (final loss {:.4}); checkpoint {}; metrics {}",
        trainer.epochs_done,
        last.total,
        args.out.display(),
        metrics_path.display()
    );
    println!("mae {:.4}  xauc {:.4}", summary.report.mae, summary.report.xauc);
    Ok(())
}

fn metrics_path_for(out: &Path) -> PathBuf {
    let mut os = out.as_os_str().to_owned();
    os.push(".metrics.json");
    PathBuf::from(os)
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation CSV.
    #[arg(long)]
    data: PathBuf,
    /// Metrics output path.
    #[arg(long)]
    out: PathBuf,
    /// Prediction mode; defaults to pruned when the checkpoint trained
    /// with tree structure learning, global otherwise.
    #[arg(long)]
    mode: Option<PredictMode>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let (trainer, tree) = Checkpoint::load(&args.checkpoint)?.restore()?;
    let eval_set = data::load_csv(&args.data)?;
    let mode = args.mode.unwrap_or_else(|| natural_mode(&trainer.cfg));
    let summary =
        experiment::evaluate_tree_model(&trainer.net, &tree, &trainer.cfg, &eval_set, mode)?;
    write_json(&summary, &args.out)?;
    print_summary(&summary);
    Ok(())
}

fn print_summary(summary: &EvalSummary) {
    println!(
        "mae {:.4}  xauc {:.4}  mean learned depth {:.3}",
        summary.report.mae, summary.report.xauc, summary.mean_learned_depth
    );
    if let Some(auc) = summary.report.avg_classifier_auc {
        println!(
            "avg classifier auc {:.4} ({} nodes skipped)",
            auc, summary.report.skipped_nodes
        );
    }
    if let Some(dev) = summary.report.mean_abs_ratio_dev {
        println!("mean |prior/posterior - 1| = {:.4}", dev);
    }
}

#[derive(Args)]
pub struct CompareArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training CSV; with `--test-data` unset the built-in synthetic
    /// benchmark is generated instead.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Comma-separated subset of mse,or,tpm,ptpm,ptpm-tsl,ptpm-ucl.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// JSON report output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn resolve_datasets(
    cfg: &RunConfig,
    data: &Option<PathBuf>,
    test_data: &Option<PathBuf>,
) -> Result<(Dataset, Dataset)> {
    let train_path = data.clone().or_else(|| cfg.train_data.clone());
    let test_path = test_data.clone().or_else(|| cfg.test_data.clone());
    match (train_path, test_path) {
        (Some(tr), Some(te)) => Ok((data::load_csv(tr)?, data::load_csv(te)?)),
        (None, None) => {
            eprintln!("no data files given; generating the built-in synthetic benchmark");
            experiment::default_benchmark(cfg.seed)
        }
        _ => Err(Error::config(
            "provide both --data and --test-data (or neither, for the synthetic benchmark)",
        )),
    }
}

pub fn compare(args: CompareArgs) -> Result<()> {
    let cfg = load_run_config(&args.config, args.seed)?;
    let (train_set, test_set) = resolve_datasets(&cfg, &args.data, &args.test_data)?;
    let methods = args.methods.unwrap_or_else(|| Method::ALL.to_vec());
    let report = experiment::compare(&methods, &train_set, &test_set, &cfg)?;
    print!("{}", experiment::render_table(&report));
    if let Some(out) = &args.out {
        write_json(&report, out)?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

#[derive(Args)]
pub struct SweepDepthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Global-tree depths to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 4, 5, 6])]
    depths: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn sweep_depth(args: SweepDepthArgs) -> Result<()> {
    let cfg = load_run_config(&args.config, args.seed)?;
    let (train_set, test_set) = resolve_datasets(&cfg, &args.data, &args.test_data)?;
    let report = experiment::depth_sweep(&args.depths, &train_set, &test_set, &cfg)?;
    println!("{:<7} {:>10} {:>10} {:>14}", "depth", "xauc", "mae", "learned_depth");
    for e in &report.entries {
        println!(
            "{:<7} {:>10.4} {:>10.4} {:>14.3}",
            e.depth, e.xauc, e.mae, e.mean_learned_depth
        );
    }
    if let Some(out) = &args.out {
        write_json(&report, out)?;
        println!("report written to {}", out.display());
    }
    Ok(())
}
