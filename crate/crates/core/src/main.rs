use std::process::ExitCode;

fn main() -> ExitCode {
    ltds::cli::run(std::env::args_os())
}
