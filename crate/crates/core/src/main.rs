use std::process::ExitCode;

fn main() -> ExitCode {
    lowreg::cli::main_with_args(std::env::args_os())
}
