//! Thin entry point; all command logic lives in the library's `cli`
//! module so it stays testable.

use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(posekey::cli::run(std::env::args_os()) as u8)
}
