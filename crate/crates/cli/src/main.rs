use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use ivfg::pipeline::KeyMode;
use ivfg_cli::commands::{self, ablation_table};
use ivfg_cli::RunConfig;

#[derive(Parser)]
#[command(name = "ivfg", version, about = "Identifiable virtual face generation on a toy dataset")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key=value` overrides applied after the file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the toy dataset and the pretraining population.
    SynthData(Common),
    /// Pretrain and freeze the encoder, generator and recognizer.
    Pretrain(Common),
    /// Train the projector on the training split.
    Train(Common),
    /// Write a virtual copy of the test split.
    Generate {
        #[arg(long, default_value = "set-a")]
        mode: KeyMode,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a generated virtual set and print the metrics report.
    Evaluate {
        #[arg(long, default_value = "set-a")]
        mode: KeyMode,
        #[command(flatten)]
        common: Common,
    },
    /// Train with each loss term removed in turn and tabulate the metrics.
    Ablate(Common),
    /// Plot a 2-D PCA projection of original and virtual features.
    PlotFeatures(Common),
    /// Print every configuration key with its resolved value.
    ShowConfig(Common),
}

fn load(common: &Common) -> Result<RunConfig> {
    RunConfig::load(common.config.as_deref(), &common.overrides)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(c) => {
            let cfg = load(&c)?;
            commands::cmd_synth_data(&cfg)?;
            println!("wrote datasets under {}", cfg.work_dir.display());
        }
        Command::Pretrain(c) => {
            let cfg = load(&c)?;
            let report = commands::cmd_pretrain(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            let outcome = commands::cmd_train(&cfg, &mut |e| {
                eprintln!(
                    "epoch {:>3}  total {:.4}  pri {:.4}  con {:.4}  intra {:.4}  inter {:.4}  reg {:.4}",
                    e.epoch, e.losses.total, e.losses.pri, e.losses.con, e.losses.intra, e.losses.inter, e.losses.reg
                )
            })?;
            println!("projector saved under {}, checksum {}", cfg.work_dir.display(), outcome.projector.checksum());
        }
        Command::Generate { mode, common } => {
            let cfg = load(&common)?;
            let assignment = commands::cmd_generate(&cfg, mode)?;
            println!(
                "wrote {} virtual identities ({} key collisions)",
                assignment.keys.len(),
                if mode == KeyMode::SetA { assignment.collisions() } else { 0 }
            );
        }
        Command::Evaluate { mode, common } => {
            let cfg = load(&common)?;
            let report = commands::cmd_evaluate(&cfg, mode)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate(c) => {
            let cfg = load(&c)?;
            let rows = commands::cmd_ablate(&cfg, &mut |r| eprintln!("finished {}", r.run.label()))?;
            print!("{}", ablation_table(&rows));
        }
        Command::PlotFeatures(c) => {
            let cfg = load(&c)?;
            println!("{}", commands::cmd_plot_features(&cfg)?.display());
        }
        Command::ShowConfig(c) => {
            let cfg = load(&c)?;
            print!("{}", cfg.render());
            println!("# hash {}", cfg.hash());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
