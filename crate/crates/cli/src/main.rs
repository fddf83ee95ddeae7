use std::process::ExitCode;

fn main() -> ExitCode {
    twinbridge::app::main_with_args(std::env::args_os())
}
