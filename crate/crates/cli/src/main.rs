use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use tomocvae::commands;
use tomocvae::plot::{self, PlotKind};
use tomocvae::{exit_code, ExperimentConfig, ValidationError};

#[derive(Parser)]
#[command(name = "tomocvae", version, about = "Conditional VAE sampling for tomographic reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    config: PathBuf,
    /// Override a configuration value, e.g. `train.batches=50`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write test phantoms and noisy sinograms.
    Generate(ConfigArgs),
    /// Train the cVAE.
    Train(ConfigArgs),
    /// Draw posterior samples for every test sinogram.
    Sample(ConfigArgs),
    /// Run the baseline reconstructions.
    Baseline(ConfigArgs),
    /// Score reconstructions and extract credible bands.
    Eval(ConfigArgs),
    /// Train and assess the two-dimensional toy model.
    Toy(ConfigArgs),
    /// Print the resolved configuration as TOML.
    ShowConfig(ConfigArgs),
    /// Render a figure from stored artifacts.
    Plot {
        #[arg(long, value_parser = plot_kind, value_name = "KIND")]
        kind: PlotKind,
        /// Grid files, archive directories or CSV files, depending on the kind.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

fn plot_kind(s: &str) -> std::result::Result<PlotKind, String> {
    s.parse().map_err(|e: anyhow::Error| e.to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => commands::cmd_generate(&a.load()?),
        Command::Train(a) => commands::cmd_train(&a.load()?),
        Command::Sample(a) => commands::cmd_sample(&a.load()?),
        Command::Baseline(a) => commands::cmd_baseline(&a.load()?),
        Command::Eval(a) => commands::cmd_eval(&a.load()?),
        Command::Toy(a) => {
            let m = commands::cmd_toy(&a.load()?)?;
            println!("histogram distance {:.4}, smallest mode share {:.4}", m.histogram_distance, m.min_mode_coverage);
            Ok(())
        }
        Command::ShowConfig(a) => {
            print!("{}", a.load()?.to_toml());
            Ok(())
        }
        Command::Plot { kind, inputs, output } => {
            if output.extension().and_then(|e| e.to_str()) != Some(kind.extension()) {
                return Err(ValidationError(format!("{kind:?} output must end in .{}", kind.extension())).into());
            }
            plot::plot(kind, &inputs, &output)?;
            plot::write_manifest(kind, &inputs, &output)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
