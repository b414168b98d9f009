use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(bspde::cli::run() as u8)
}
