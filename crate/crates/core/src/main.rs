use std::process::ExitCode;

use capalign::cli;

fn main() -> ExitCode {
    if let Err(e) = cli::configure_threads() {
        eprintln!("error: {}", e.message());
        return ExitCode::from(e.exit_code() as u8);
    }
    ExitCode::from(cli::run(std::env::args().skip(1)) as u8)
}
