use std::process::ExitCode;

fn main() -> ExitCode {
    smoothcert::cli::main_with_args(std::env::args_os())
}
