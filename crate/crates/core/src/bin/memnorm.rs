use std::process::ExitCode;

fn main() -> ExitCode {
    memnorm::cli::main_with_args(std::env::args_os())
}
