use std::process::ExitCode;

use clap::Parser;
use limitd::{exit_code, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli.run(&mut std::io::stdout().lock());
    if let Err(e) = &result {
        eprintln!("limitd: {e}");
    }
    ExitCode::from(exit_code(&result) as u8)
}
