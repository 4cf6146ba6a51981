mod args;
mod commands;

use std::process::ExitCode;

use enfc_core::ErrorClass;

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 2,
        ErrorClass::Data | ErrorClass::Io => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ENFC_LOG", "warn")).init();
    let cli = match args::parse(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(args::ParseError::Clap(e)) => e.exit(),
        Err(args::ParseError::Core(e)) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(e.class()));
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
