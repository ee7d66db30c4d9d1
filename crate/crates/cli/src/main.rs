use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use partial_screen_core::audit::pipeline_grad_check;
use partial_screen_core::config::{parse_override, RunConfig};
use partial_screen_core::harness;
use partial_screen_core::synth::describe_dataset;
use partial_screen_core::Error;

#[derive(Parser)]
#[command(name = "partial-screen", version, about = "Partially supervised multi-label training on synthetic domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key = value` lines; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    GenerateData(Common),
    /// Train a model, writing per-epoch checkpoints and the training log.
    Train(Common),
    /// Evaluate a checkpoint on held-out and unseen domains.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<paths.output>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the configured ablation sweeps.
    Ablate(Common),
    /// Finite-difference audit of the full training objective.
    GradCheck(Common),
    /// Print the header of a dataset file.
    Describe {
        #[command(flatten)]
        common: Common,
        /// Defaults to `paths.dataset`.
        path: Option<PathBuf>,
    },
}

enum Failure {
    Core(Error),
    Audit,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn load_config(c: &Common) -> Result<RunConfig, Error> {
    let text = match &c.config {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    let overrides = c
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    RunConfig::from_text_with(&text, &overrides)
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenerateData(c) => {
            let cfg = load_config(&c)?;
            let (data, manifest) = harness::generate_data(&cfg)?;
            println!("wrote {} and {}", data.display(), manifest.display());
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let out = harness::train_command(&cfg)?;
            if let Some(last) = out.log.rows.last() {
                println!("epoch {}: total {:.6}", last.epoch, last.total);
            }
            println!("wrote {} and {}", out.log_path.display(), out.checkpoint.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let ck = checkpoint.unwrap_or_else(|| harness::final_checkpoint(&cfg));
            let out = harness::eval_command(&cfg, &ck)?;
            for (name, rep) in &out.groups {
                print!("{}", rep.to_text(name));
            }
            println!("wrote {} and {}", out.report_path.display(), out.csv_path.display());
        }
        Command::Ablate(c) => {
            let cfg = load_config(&c)?;
            let (rows, path) = harness::ablate_command(&cfg)?;
            let failed: usize = rows.iter().map(|r| r.failed.len()).sum();
            println!("{} cells, {failed} failed runs; wrote {}", rows.len(), path.display());
        }
        Command::GradCheck(c) => {
            let cfg = load_config(&c)?;
            let report = pipeline_grad_check(&cfg.grad_check)?;
            print!("{}", harness::format_grad_report(&report));
            if !report.passed() {
                return Err(Failure::Audit);
            }
        }
        Command::Describe { common, path } => {
            let cfg = load_config(&common)?;
            let path = path.unwrap_or(cfg.paths.dataset);
            let header = describe_dataset(&fs::read(&path).map_err(Error::from)?)?;
            println!("{header}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Audit) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            log::debug!("{e:?}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
