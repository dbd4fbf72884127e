mod config;
mod scenarios;

use anyhow::Result;
use clap::Parser;

#[derive(Parser)]
#[command(name = "tdsim", version, about = "Pipeline-parallel LLM inference simulator")]
struct Cli {
    #[command(subcommand)]
    command: config::Command,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    config::execute(cli.command)
}
