//! Experiment driver for the `priceform` library.

use clap::Parser;
use priceform::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(manifest) => {
            println!(
                "{} finished in {} ms; wrote {}",
                manifest.command,
                manifest.duration_ms,
                manifest.outputs.join(", ")
            );
        }
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}
