use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = mas_cli::Cli::parse();
    match mas_cli::execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if mas_cli::is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
