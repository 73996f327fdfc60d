//! Thin wrapper: parse the command line, run it, map errors to exit codes.

use clap::Parser;

use madtwin::cli::{run, Cli};

fn main() {
    match run(Cli::parse()) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
