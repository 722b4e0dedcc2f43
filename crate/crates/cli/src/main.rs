mod args;
mod commands;
mod config;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, FromArgMatches};
use prunecast_core::Error;

use args::{Cli, Command};

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERICAL: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numerical() => NUMERICAL,
        Error::Config(_) => USAGE,
        _ => DATA,
    }
}

fn parse(argv: &[OsString]) -> Result<Cli, clap::Error> {
    let matches = Cli::command().try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

const SUBCOMMANDS: [&str; 7] = ["synth", "prune", "train", "eval", "finetune", "audit", "bench"];

/// The `--config` path and subcommand token, found without full validation so
/// required flags may come from the file.
fn prescan(argv: &[OsString]) -> (Option<OsString>, Option<String>) {
    let (mut config, mut sub) = (None, None);
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = it.next().cloned();
        } else if let Some(v) = s.strip_prefix("--config=") {
            config = Some(v.into());
        } else if s == "--seed" {
            it.next();
        } else if sub.is_none() && SUBCOMMANDS.contains(&s.as_ref()) {
            sub = Some(s.into_owned());
        }
    }
    (config, sub)
}

/// Parses argv with the config file's flags spliced in ahead of the explicit ones.
fn parse_with_config(argv: &[OsString]) -> Result<Cli, ExitCode> {
    let report = |e: clap::Error| {
        let _ = e.print();
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
            _ => ExitCode::from(USAGE),
        }
    };
    let merged = match prescan(argv) {
        (Some(path), Some(sub)) => {
            let entries = config::load(path.as_ref()).map_err(|e| {
                eprintln!("error: config {}", e.0);
                ExitCode::from(USAGE)
            })?;
            config::splice(argv, &sub, config::as_flags(&entries))
        }
        _ => argv.to_vec(),
    };
    parse(&merged).map_err(report)
}

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let cli = match parse_with_config(&argv) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let seed = cli.seed;
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a, seed),
        Command::Prune(a) => commands::prune(a),
        Command::Train(a) => commands::train(a, seed),
        Command::Eval(a) => commands::eval(a),
        Command::Finetune(a) => commands::finetune_cmd(a, seed),
        Command::Audit(a) => commands::audit_cmd(a),
        Command::Bench(a) => commands::bench(a, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
