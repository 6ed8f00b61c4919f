//! Binary entry point; all logic lives in the library's `cli` module.

use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(modeshift::cli::run_from(std::env::args_os()))
}
