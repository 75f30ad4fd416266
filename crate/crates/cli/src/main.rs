mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "latentmark", version, about = "Latent-decoder image watermarking")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Flat TOML watermarking config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for outputs and the manifest.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the reference autoencoder on the procedural corpus.
    PretrainAe(commands::PretrainAe),
    /// Train embedding modules and extractor against a frozen autoencoder.
    Train(commands::Train),
    /// Watermark an existing cover image (post-generation).
    Embed(commands::Embed),
    /// Decode the latent of an image with a watermark (in-generation).
    Generate(commands::Generate),
    /// Extract the message bits from an image.
    Extract(commands::Extract),
    /// Match an image against one registered message.
    Detect(commands::Detect),
    /// Attribute an image to one user of a registry.
    Attribute(commands::Attribute),
    /// Apply one attack to an image.
    Attack(commands::Attack),
    /// Bit accuracy and image quality over attack presets.
    Eval(commands::Eval),
    /// Detection false-positive rate per threshold.
    FprTable(commands::FprTable),
    /// Monte Carlo attribution with random users.
    SimulateAttribution(commands::SimulateAttribution),
    /// Render SVG charts from run outputs.
    Plot(plot::Plot),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let g = cli.global;
    let res = match cli.command {
        Command::PretrainAe(c) => c.run(&g, argv),
        Command::Train(c) => c.run(&g, argv),
        Command::Embed(c) => c.run(&g, argv),
        Command::Generate(c) => c.run(&g, argv),
        Command::Extract(c) => c.run(&g, argv),
        Command::Detect(c) => c.run(&g, argv),
        Command::Attribute(c) => c.run(&g, argv),
        Command::Attack(c) => c.run(&g, argv),
        Command::Eval(c) => c.run(&g, argv),
        Command::FprTable(c) => c.run(&g, argv),
        Command::SimulateAttribution(c) => c.run(&g, argv),
        Command::Plot(c) => c.run(&g, argv),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for invalid inputs, 4 for everything that failed while running.
fn exit_code(e: &anyhow::Error) -> u8 {
    use latentmark::Error as E;
    match e.chain().find_map(|c| c.downcast_ref::<E>()) {
        Some(E::Io(_) | E::Codec(_) | E::NonFinite { .. }) | None => 4,
        Some(_) => 3,
    }
}
