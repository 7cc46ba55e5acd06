use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use skdf_cli::commands;
use skdf_cli::config::{Overrides, RunConfig, TeacherMode};
use skdf_cli::CliError;

#[derive(Parser)]
#[command(name = "skdf", version, about = "Open-world detection with distilled teacher knowledge on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// 1-based task index.
    #[arg(long)]
    task: Option<usize>,
    #[arg(long, value_enum)]
    teacher: Option<TeacherMode>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let overrides = Overrides {
            seed: self.seed,
            task: self.task,
            teacher: self.teacher,
            out_dir: self.out.clone(),
        };
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset, task split and statistics.
    GenerateData(Common),
    /// Precompute oracle teacher detections.
    DistillLabels(Common),
    /// Train tasks up to --task.
    Train(Common),
    /// Evaluate the checkpoint of --task on its test scenes.
    Eval(Common),
    /// Run the ablation grid on task 1.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Run a single variant instead of the configured list.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Render plots from the run and data directories.
    Report(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateData(c) => commands::generate_data(&c.resolve()?),
        Command::DistillLabels(c) => commands::distill_labels(&c.resolve()?),
        Command::Train(c) => commands::train(&c.resolve()?),
        Command::Eval(c) => {
            let report = commands::eval(&c.resolve()?)?;
            print!("{}", skdf::eval::render_table(std::slice::from_ref(&report)));
            Ok(())
        }
        Command::Ablate { common, variant } => {
            let report = commands::ablate(&common.resolve()?, variant.as_deref())?;
            print!("{}", report.table());
            Ok(())
        }
        Command::Report(c) => {
            for p in commands::report(&c.resolve()?)? {
                log::info!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
