mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::UsageError;

#[derive(Parser, Debug)]
#[command(name = "vxp", version, about = "Cross-modal camera/LiDAR place recognition")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Print the resolved configuration and exit
    #[arg(long, global = true)]
    print_config: bool,
    /// Seed; falls back to the config file, then VXP_SEED, then 0
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset
    Synth(commands::SynthArgs),
    /// Run one training stage
    Train(commands::TrainArgs),
    /// Encode every manifest sample into a descriptor file
    Extract(commands::ExtractArgs),
    /// Build a retrieval index from a descriptor file
    Index(commands::IndexArgs),
    /// Evaluate query descriptors against a database
    Eval(commands::EvalArgs),
    /// Render a recall@K curve as SVG
    Plot(commands::PlotArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = cli
        .common
        .set
        .iter()
        .map(|s| settings::split_pair(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = cli.common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let settings = settings::Settings::resolve(cli.common.config.as_deref(), &overrides)?;
    if cli.common.print_config {
        print!("{}", settings.render());
        return Ok(());
    }
    for line in settings.render().lines() {
        log::info!("config {line}");
    }
    match cli.command {
        Command::Synth(a) => commands::synth(&settings, &a),
        Command::Train(a) => commands::train(&settings, &a),
        Command::Extract(a) => commands::extract(&a),
        Command::Index(a) => commands::index(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Plot(a) => commands::plot(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
