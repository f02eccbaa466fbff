use std::process::ExitCode;

use clap::Parser;

use selfmae_cli::{error_kind, error_line, exit_code, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_line("usage", 1, &e.to_string()));
            return ExitCode::from(1);
        }
    };
    let mut stdout = std::io::stdout();
    match run(&cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", error_line(error_kind(&e), code, &e.to_string()));
            ExitCode::from(code as u8)
        }
    }
}
