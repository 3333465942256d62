use std::process::ExitCode;

fn main() -> ExitCode {
    provcap::cli::main_with_args(std::env::args_os())
}
