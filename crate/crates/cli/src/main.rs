//! `anomaly-ae`: train, evaluate, localize and compare anomaly-detection
//! autoencoders.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::commands::CliError;
use crate::config::{read_config_file, RunConfig, FLAG_KEYS, VALUE_KEYS};

fn with_settings(cmd: Command) -> Command {
    let mut cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key=value settings file; flags override it"),
    );
    for (key, help) in VALUE_KEYS {
        cmd = cmd.arg(Arg::new(*key).long(*key).value_name("VALUE").help(*help));
    }
    for (key, help) in FLAG_KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(*key)
                .action(ArgAction::SetTrue)
                .help(*help),
        );
    }
    cmd
}

fn cli() -> Command {
    Command::new("anomaly-ae")
        .about("Unsupervised image anomaly detection with convolutional autoencoders")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_settings(
            Command::new("train").about("Train one model on healthy images"),
        ))
        .subcommand(with_settings(
            Command::new("evaluate").about("Score the test split and write a report"),
        ))
        .subcommand(with_settings(
            Command::new("localize").about("Write the reconstruction-error heatmap of one image"),
        ))
        .subcommand(with_settings(
            Command::new("compare").about("Train and evaluate CAE, CVAE and VQ-VAE side by side"),
        ))
        .subcommand(with_settings(
            Command::new("synth").about("Write the synthetic leaf benchmark to --out"),
        ))
}

fn settings(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut merged = BTreeMap::new();
    if let Some(path) = m.get_one::<String>("config") {
        merged = read_config_file(&PathBuf::from(path))?;
    }
    for (key, _) in VALUE_KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            merged.insert(key.to_string(), v.clone());
        }
    }
    for (key, _) in FLAG_KEYS {
        if m.get_flag(key) {
            merged.insert(key.to_string(), "true".into());
        }
    }
    Ok(RunConfig::from_settings(&merged)?)
}

fn run() -> Result<(), CliError> {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return Err(if e.use_stderr() {
                CliError::Reported(2)
            } else {
                CliError::Reported(0)
            });
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = settings(sub)?;
    match name {
        "train" => commands::train(&cfg),
        "evaluate" => commands::evaluate(&cfg),
        "localize" => commands::localize(&cfg),
        "compare" => commands::compare(&cfg),
        "synth" => commands::synth(&cfg),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Reported(code)) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
