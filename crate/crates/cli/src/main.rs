//! Command-line front end: dataset generation, oracle labeling, training,
//! evaluation and the experiment sweeps.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use rispls::baselines::OracleConfig;
use rispls::channel::ScenarioConfig;
use rispls::harness::{
    ablate, ablation_rows, configure_threads, default_power_grid, default_scale_grid, label, parse_head, power_rows,
    scale_rows, sweep_power, sweep_scale, write_csv, AblationData, DatasetFile, ABLATION_COLUMNS, POWER_COLUMNS,
    SCALE_COLUMNS,
};
use rispls::model::{ModelDims, ModelFlags};
use rispls::training::{evaluate, fmt_f64, load_checkpoint, train, TrainConfig, EVAL_COLUMNS};

#[derive(Parser)]
#[command(name = "rispls", version, about = "Two-stage graph network for secrecy energy efficiency in RIS-aided MISO links")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw channel realizations and write a dataset file.
    GenData(GenData),
    /// Run the gradient oracle over a dataset and append its SEE labels.
    Label(Label),
    /// Train a model; optional epoch log columns: epoch, mean_loss, val_see, wall_seconds.
    Train(Train),
    /// Evaluate a checkpoint on a labeled dataset; CSV columns:
    /// sample_id, see, oracle_see, ratio, feasible.
    Eval(Eval),
    /// Evaluate a checkpoint over a transmit-power grid; CSV columns:
    /// budget_dbm, mean_see, mean_ratio.
    SweepPower(SweepPower),
    /// Evaluate a checkpoint over (L, K, M) settings without retraining; CSV
    /// columns: l, k, m, samples, mean_see, mean_ratio, violations, param_count.
    SweepScale(SweepScale),
    /// Train and compare the four residual / two-stage settings; CSV columns:
    /// residual, two_stage, best_val_see, mean_see, mean_ratio, violations.
    Ablate(Ablate),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 4)]
    nt: usize,
    #[arg(long, default_value_t = 4)]
    l: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// Number of samples.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Transmit power budget in dBm.
    #[arg(long, default_value_t = 30.0)]
    p_max_dbm: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct OracleArgs {
    #[arg(long, default_value_t = 8)]
    restarts: usize,
    #[arg(long, default_value_t = 1500)]
    steps: usize,
    #[arg(long, default_value_t = 0.02)]
    step_size: f64,
    #[arg(long, default_value_t = 0)]
    oracle_seed: u64,
}

impl OracleArgs {
    fn config(&self) -> OracleConfig {
        OracleConfig {
            restarts: self.restarts,
            steps: self.steps,
            step_size: self.step_size,
            seed: self.oracle_seed,
            ..OracleConfig::default()
        }
    }
}

#[derive(Args)]
struct Label {
    /// Dataset to label in place.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    oracle: OracleArgs,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// beam-direct or model-based.
    #[arg(long, default_value = "model-based")]
    head: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Leakage weight of the training loss.
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// Trailing samples held out for model selection.
    #[arg(long, default_value_t = 512)]
    validation: usize,
    /// Use the full-size layer widths instead of the desk preset.
    #[arg(long)]
    full_dims: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainArgs {
    fn config(&self, flags: ModelFlags) -> Result<TrainConfig> {
        Ok(TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            gamma: self.gamma,
            head: parse_head(&self.head)?,
            flags,
            dims: if self.full_dims { ModelDims::full() } else { ModelDims::desk() },
            validation: self.validation,
            seed: self.seed,
            ..TrainConfig::default()
        })
    }
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    no_residual: bool,
    #[arg(long)]
    no_two_stage: bool,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    /// Labeled dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optional CDF of achieved SEE; columns: see, cdf.
    #[arg(long)]
    cdf: Option<PathBuf>,
}

#[derive(Args)]
struct SweepPower {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use only the first N samples of the dataset.
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated budgets in dBm (default 0,3,...,33).
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[command(flatten)]
    oracle: OracleArgs,
}

#[derive(Args)]
struct SweepScale {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Test samples per grid point.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Seed of the generated test sets.
    #[arg(long, default_value_t = 2)]
    seed: u64,
    #[command(flatten)]
    oracle: OracleArgs,
}

#[derive(Args)]
struct Ablate {
    /// Training dataset (validation split taken from its tail).
    #[arg(long)]
    data: PathBuf,
    /// Labeled test dataset.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory for the four checkpoints.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let scenario = ScenarioConfig {
                seed: a.seed,
                p_max_dbm: a.p_max_dbm,
                ..ScenarioConfig::default().with_dims(a.nt, a.l, a.k, a.m)
            };
            scenario.validate()?;
            let data = DatasetFile::generate(&scenario, a.n)?;
            data.write(&a.out)?;
            info!("wrote {} samples to {}", a.n, a.out.display());
        }
        Command::Label(a) => {
            let mut data = DatasetFile::read(&a.data)?;
            label(&mut data, &a.oracle.config())?;
            data.write(&a.data)?;
            let labels = data.labels(&a.data)?;
            let mean = labels.iter().sum::<f64>() / labels.len().max(1) as f64;
            println!("labeled {} samples, mean oracle SEE {mean:.6}", labels.len());
        }
        Command::Train(a) => {
            let flags = ModelFlags {
                residual: !a.no_residual,
                two_stage: !a.no_two_stage,
            };
            let cfg = TrainConfig {
                dataset: a.data,
                checkpoint: a.out,
                log: a.log,
                ..a.train.config(flags)?
            };
            let (model, report) = train(&cfg)?;
            println!(
                "trained {} parameters for {} steps; best validation SEE {:.6} at epoch {}",
                model.params.scalar_count(),
                report.steps,
                report.best_val_see,
                report.best_epoch
            );
        }
        Command::Eval(a) => {
            let model = load_checkpoint(&a.model)?;
            let data = DatasetFile::read(&a.data)?;
            let labels = data.labels(&a.data)?;
            let report = evaluate(&model, &data.samples, labels, &data.scenario.budget())?;
            write_csv(&a.out, &EVAL_COLUMNS, &report.csv_rows())?;
            if let Some(path) = a.cdf {
                let rows: Vec<Vec<String>> = report.cdf.iter().map(|(s, c)| vec![fmt_f64(*s), fmt_f64(*c)]).collect();
                write_csv(&path, &["see", "cdf"], &rows)?;
            }
            println!(
                "mean ratio {:.6}, median ratio {:.6}, mean SEE {:.6}, violations {}, inference {:.3e} s/sample",
                report.mean_ratio, report.median_ratio, report.mean_see, report.violations, report.infer_seconds_per_sample
            );
            if report.violations > 0 {
                bail!("{} infeasible designs", report.violations);
            }
        }
        Command::SweepPower(a) => {
            let model = load_checkpoint(&a.model)?;
            let data = DatasetFile::read(&a.data)?;
            let n = a.n.unwrap_or(data.samples.len()).min(data.samples.len());
            let grid = a.grid.unwrap_or_else(default_power_grid);
            let points = sweep_power(&model, &data.samples[..n], data.scenario.p_c_watt, &grid, &a.oracle.config())?;
            write_csv(&a.out, &POWER_COLUMNS, &power_rows(&points))?;
            for p in &points {
                println!("{:>5.1} dBm: mean SEE {:.6}, mean ratio {:.6}", p.budget_dbm, p.mean_see, p.mean_ratio);
            }
        }
        Command::SweepScale(a) => {
            let model = load_checkpoint(&a.model)?;
            let scenario = ScenarioConfig {
                seed: a.seed,
                ..ScenarioConfig::default()
            };
            let points = sweep_scale(&model, &scenario, &default_scale_grid(), a.n, &a.oracle.config())?;
            write_csv(&a.out, &SCALE_COLUMNS, &scale_rows(&points))?;
            for p in &points {
                println!(
                    "(L, K, M) = ({}, {}, {}): mean ratio {:.6}, violations {}",
                    p.l, p.k, p.m, p.mean_ratio, p.violations
                );
            }
        }
        Command::Ablate(a) => {
            let base = a.train.config(ModelFlags::default())?;
            let data = DatasetFile::read(&a.data)?;
            let test = DatasetFile::read(&a.test)?;
            if data.samples.len() <= base.validation {
                bail!("training dataset is smaller than the validation split");
            }
            let split = data.samples.len() - base.validation;
            let rows = ablate(
                &base,
                &AblationData {
                    scenario: &data.scenario,
                    train: &data.samples[..split],
                    val: &data.samples[split..],
                    test: &test.samples,
                    labels: test.labels(&a.test)?,
                },
            )?;
            if let Some(dir) = &a.checkpoints {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                for (row, model) in &rows {
                    let name = format!("residual_{}_two_stage_{}.ckpt", row.residual, row.two_stage);
                    rispls::training::save_checkpoint(model, &dir.join(name))?;
                }
            }
            let table: Vec<_> = rows.into_iter().map(|(r, _)| r).collect();
            write_csv(&a.out, &ABLATION_COLUMNS, &ablation_rows(&table))?;
            for r in &table {
                println!(
                    "residual {:<5} two-stage {:<5}: mean ratio {:.6}",
                    r.residual, r.two_stage, r.mean_ratio
                );
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
