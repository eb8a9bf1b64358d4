use std::process::ExitCode;

fn main() -> ExitCode {
    cmr_core::cli::main_with(std::env::args_os())
}
