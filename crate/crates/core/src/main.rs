use clap::Parser;
use tracing_subscriber::EnvFilter;

use parsearch::cli::{execute, Cli};

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    if let Err(err) = execute(cli) {
        eprintln!("parsearch: {err}");
        std::process::exit(err.exit_code());
    }
}
