mod commands;
mod config;
mod logging;
mod render;
mod table;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use log::LevelFilter;

#[derive(Parser, Debug)]
#[command(name = "mdae", version, about = "Motion diffusion autoencoder toolkit")]
struct Cli {
    /// TOML or JSON file supplying flag values; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true, default_value = "info")]
    log_level: LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Downsample, normalize and mirror a dataset; report outliers.
    Prep(commands::PrepArgs),
    /// Convert marker coordinates to pose features.
    Features(commands::FeaturesArgs),
    /// Convert pose features back to marker coordinates.
    Coords(commands::CoordsArgs),
    /// Link-length variability and reconstruction error of a dataset.
    CheckAnatomy(commands::CheckAnatomyArgs),
    /// Generate a synthetic labelled dataset.
    Synth(commands::SynthArgs),
    /// Train (or resume training) the diffusion autoencoder.
    Train(commands::TrainArgs),
    /// Write semantic codes of a dataset to a CSV table.
    Embed(commands::EmbedArgs),
    /// Fit the linear attribute head on embeddings.
    TrainHead(commands::TrainHeadArgs),
    /// Change the technique and/or grade of one motion.
    Manipulate(commands::ManipulateArgs),
    /// Confusion matrix, UAR and grade MAE of the head.
    EvalSeparability(commands::EvalSeparabilityArgs),
    /// Fréchet distance between two embedding tables.
    EvalFid(commands::EvalFidArgs),
    /// 2D principal-component projection of embeddings.
    Project(commands::ProjectArgs),
    /// Per-frame marker CSV and SVG skeleton frames.
    Render(commands::RenderArgs),
}

#[derive(Debug, Clone, Copy)]
pub struct Globals {
    pub seed: u64,
}

fn parse(args: Vec<OsString>) -> Result<Cli, clap::Error> {
    let mut cmd = Cli::command().args_override_self(true);
    let names: Vec<String> = cmd.get_subcommands().map(|c| c.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |c| c.args_override_self(true));
    }
    cmd.build();
    let args = match config::find_path(&args) {
        Some(path) => match config::load(path.as_ref()).and_then(|c| config::inject(args, &cmd, &c)) {
            Ok(a) => a,
            Err(e) => return Err(cmd.error(clap::error::ErrorKind::InvalidValue, format!("{e:#}"))),
        },
        None => args,
    };
    let matches = cmd.try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

fn report_error(e: &anyhow::Error) {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<mdae::Error>())
        .map_or("error", mdae::Error::kind);
    let line = serde_json::json!({ "error": { "kind": kind, "message": format!("{e:#}") } });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match parse(std::env::args_os().collect()) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    logging::init(cli.log_level);
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not set thread count: {e}");
        }
    }
    let globals = Globals { seed: cli.seed };
    match commands::run(cli.command, globals) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::from(1)
        }
    }
}
