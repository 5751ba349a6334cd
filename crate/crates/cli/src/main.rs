//! `smbea` command line: build model zoos, generate datasets, run
//! attacks with transfer evaluation, sweep ablations and render
//! reports.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use smbea_core::data::gen_dataset;
use smbea_core::experiment::{ablation_run, run_experiment, ExperimentConfig, Sweep};
use smbea_core::imageio::save_png;
use smbea_core::losses::Task;
use smbea_core::report::{build_ablation_table, build_bundle, load_bundle, save_bundle, write_ablation, write_report};
use smbea_core::zoo::{build_zoo, load_zoo, save_zoo, ZooConfig};

#[derive(Parser)]
#[command(name = "smbea", about = "Serial mini-batch ensemble attacks on pixel-to-pixel models", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Translation,
    Saliency,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Translation => Task::Translation,
            TaskArg::Saliency => Task::Saliency,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Strategy,
    TapDepth,
    Momentum,
}

#[derive(Subcommand)]
enum Command {
    /// Model zoo management.
    Zoo {
        #[command(subcommand)]
        command: ZooCommand,
    },
    /// Synthetic dataset management.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Attack experiments.
    Attack {
        #[command(subcommand)]
        command: AttackCommand,
    },
    /// Ablation sweeps over a base experiment config.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        sweep: SweepArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report rendering.
    Report {
        #[command(subcommand)]
        command: ReportCommand,
    },
}

#[derive(Subcommand)]
enum ZooCommand {
    /// Train the 16 base models plus dilated variants and save them.
    Build {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        models: usize,
        #[arg(long, default_value_t = 64)]
        hw: usize,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 12)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Write paired samples to disk (inputs as PNG; saliency densities
    /// as TSR1 tensors).
    Gen {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        hw: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum AttackCommand {
    /// Run the configured attacks and write the transfer report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Regenerate report files from a saved trace bundle.
    Render {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text).context("parsing experiment config")?;
    Ok(cfg)
}

fn resolve_out(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    match flag.or_else(|| cfg.out_dir.as_ref().map(PathBuf::from)) {
        Some(p) => Ok(p),
        None => bail!("no output directory: pass --out or set out_dir in the config"),
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Zoo { command } => match command {
            ZooCommand::Build { task, out, seed, models, hw, pairs, epochs, lr } => {
                let cfg = ZooConfig {
                    task: task.into(),
                    n_base: models,
                    hw,
                    n_pairs: pairs,
                    epochs,
                    lr,
                    seed,
                };
                let zoo = build_zoo(&cfg).context("zoo build")?;
                save_zoo(&zoo, &out).context("zoo build: saving")?;
                println!("zoo build: wrote {} models to {}", zoo.entries.len(), out.display());
            }
        },
        Command::Dataset { command } => match command {
            DatasetCommand::Gen { task, n, hw, seed, out } => {
                let task: Task = task.into();
                let data = gen_dataset(task, n, hw, seed).context("dataset gen")?;
                std::fs::create_dir_all(&out).context("dataset gen: creating output dir")?;
                for (i, (x, y)) in data.inputs.iter().zip(&data.targets).enumerate() {
                    save_png(x, out.join(format!("input_{i:03}.png"))).context("dataset gen: writing input")?;
                    match task {
                        Task::Translation => {
                            save_png(y, out.join(format!("target_{i:03}.png")))
                                .context("dataset gen: writing target")?;
                        }
                        Task::Saliency => {
                            y.save_tsr(out.join(format!("target_{i:03}.tsr")))
                                .context("dataset gen: writing target")?;
                        }
                    }
                }
                println!("dataset gen: wrote {n} pairs to {}", out.display());
            }
        },
        Command::Attack { command } => match command {
            AttackCommand::Run { config, out } => {
                let cfg = load_config(&config)?;
                let out = resolve_out(&cfg, out)?;
                let zoo_dir = cfg
                    .zoo_dir
                    .clone()
                    .context("attack run: config needs zoo_dir")?;
                let zoo = load_zoo(&zoo_dir).context("attack run: loading zoo")?;
                let outcomes = run_experiment(&zoo, &cfg).context("attack run")?;
                let bundle = build_bundle(cfg.task, &outcomes).context("attack run: assembling report")?;
                save_bundle(&bundle, &out).context("attack run: saving bundle")?;
                write_report(&bundle, &out).context("attack run: writing report")?;
                println!(
                    "attack run: {} attacks over {} columns; report in {}",
                    bundle.table.rows.len(),
                    bundle.table.columns.len(),
                    out.display()
                );
                print!("{}", std::fs::read_to_string(out.join("summary.txt"))?);
            }
        },
        Command::Ablate { config, sweep, out } => {
            let cfg = load_config(&config)?;
            let out = resolve_out(&cfg, out)?;
            let zoo_dir = cfg.zoo_dir.clone().context("ablate: config needs zoo_dir")?;
            let zoo = load_zoo(&zoo_dir).context("ablate: loading zoo")?;
            let sweep = match sweep {
                SweepArg::Strategy => Sweep::strategies_default(),
                SweepArg::TapDepth => Sweep::tap_depth_default(),
                SweepArg::Momentum => Sweep::momentum_default(&cfg.attack_cfg),
            };
            let rows = ablation_run(&zoo, &cfg, &sweep).context("ablate")?;
            let table = build_ablation_table(cfg.task, &rows).context("ablate: assembling table")?;
            write_ablation(&table, &out).context("ablate: writing table")?;
            println!("ablate: {} rows; table in {}", table.rows.len(), out.display());
            print!("{}", std::fs::read_to_string(out.join("ablation.txt"))?);
        }
        Command::Report { command } => match command {
            ReportCommand::Render { trace } => {
                let bundle = load_bundle(&trace).context("report render: loading bundle")?;
                write_report(&bundle, &trace).context("report render")?;
                println!("report render: regenerated report in {}", trace.display());
            }
        },
    }
    Ok(())
}

fn main() {
    env_logger::init();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
