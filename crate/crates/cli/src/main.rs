use std::process::ExitCode;

use clap::error::ErrorKind;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match rock_cli::run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
                let code = match clap_err.kind() {
                    ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                    _ => 2,
                };
                let _ = clap_err.print();
                return ExitCode::from(code);
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
