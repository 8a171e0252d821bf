use std::path::PathBuf;
use std::process::ExitCode;

use aalab_core::eval::PipelinePreset;
use aalab_core::experiment::{load_config, Experiment, StageStatus};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aalab", version, about = "Active-alignment simulation laboratory")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `global_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single pipeline for `train` and `eval`, e.g. `DA3` or `OnDevice(2)`. Default: all six.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true, value_enum, default_value_t = Determinism::Strict)]
    determinism: Determinism,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Determinism {
    /// One worker thread.
    Strict,
    /// Use every core for data generation and batch assembly.
    Fast,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source, target, test and oracle datasets.
    GenData,
    /// Train the domain-transformation generator.
    TrainTransform,
    /// Translate the source dataset into the target style.
    Translate,
    /// Train aligner models.
    Train,
    /// Evaluate trained aligners on the test set.
    Eval,
    /// Collect evaluation reports into metrics.csv.
    Report,
    /// Every stage in order.
    RunAll,
}

fn status_word(s: StageStatus) -> &'static str {
    match s {
        StageStatus::Ran => "done",
        StageStatus::UpToDate => "up to date",
    }
}

fn run(cli: Cli) -> aalab_core::Result<()> {
    let path = cli
        .config
        .ok_or_else(|| aalab_core::Error::InvalidConfig { key: "--config".into(), msg: "required".into() })?;
    let mut cfg = load_config(&path, cli.seed)?;
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    if cli.determinism == Determinism::Strict {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let presets = match &cli.preset {
        Some(name) => vec![name.parse::<PipelinePreset>()?],
        None => PipelinePreset::table(cfg.sizes.n_oracle),
    };
    let exp = Experiment::new(cfg)?;
    let say = |stage: &str, s: StageStatus| println!("{stage}: {}", status_word(s));
    match cli.command {
        Command::GenData => say("gen-data", exp.gen_data()?),
        Command::TrainTransform => say("train-transform", exp.train_transform()?),
        Command::Translate => say("translate", exp.translate()?),
        Command::Train => {
            for p in presets {
                say(&format!("train {p}"), exp.train(p)?);
            }
        }
        Command::Eval => {
            for p in presets {
                say(&format!("eval {p}"), exp.eval(p)?);
                let (r, adj) = exp.read_report(p)?;
                println!(
                    "  MAE x {:.3} y {:.3} avg {:.3} um, SD avg {:.3} um, adjust success {:.1}% at {} um",
                    r.mae_x,
                    r.mae_y,
                    r.mae_avg,
                    r.sd_avg,
                    adj.success_rate * 100.0,
                    adj.threshold_um
                );
            }
        }
        Command::Report => println!("wrote {}", exp.report()?.display()),
        Command::RunAll => {
            let path = exp.run_all()?;
            print!(
                "{}",
                std::fs::read_to_string(&path).map_err(|e| aalab_core::Error::Io { path: path.clone(), source: e })?
            );
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
