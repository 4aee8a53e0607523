use std::process::ExitCode;

use clap::Parser;
use mrsynth::cli::{run, Cli};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={}", one_line(first));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match e.downcast_ref::<mrsynth::Error>() {
                Some(err @ mrsynth::Error::Config(_)) => (err.kind(), EXIT_CONFIG),
                Some(err) => (err.kind(), EXIT_FAILURE),
                None => ("internal", EXIT_FAILURE),
            };
            eprintln!("error: kind={kind} msg={}", one_line(&format!("{e:#}")));
            ExitCode::from(code)
        }
    }
}

fn real_main(cli: Cli) -> anyhow::Result<()> {
    run(cli)?;
    Ok(())
}
