use std::process::ExitCode;

use btm_cli::{execute, Cli, Settings};
use clap::Parser;

fn init_logging() -> Result<(), String> {
    let level = match std::env::var("BTM_LOG") {
        Ok(v) => v,
        Err(_) => "error".to_owned(),
    };
    if !matches!(level.as_str(), "error" | "info" | "debug") {
        return Err(format!(
            "BTM_LOG must be one of error, info, debug; got {level:?}"
        ));
    }
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = init_logging() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let settings = match Settings::resolve(&cli.common) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    if let Some(jobs) = settings.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(&cli, &settings) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
