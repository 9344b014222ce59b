//! `ctex`: command-line driver for the chaotic texture pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Arg, ArgAction, ArgMatches};
use serde_json::json;

use commands::{Command, Output};
use config::Config;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ctex::Error> for CliError {
    fn from(e: ctex::Error) -> Self {
        match e {
            ctex::Error::InvalidParam(_)
            | ctex::Error::InvalidRange { .. }
            | ctex::Error::CropTooLarge { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn build(commands: &[Command]) -> clap::Command {
    let mut root = clap::Command::new("ctex")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Chaotic contrastive texture pipeline")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("jobs")
                .long("jobs")
                .global(true)
                .value_parser(clap::value_parser!(usize))
                .help("cap on worker threads [default: available cores]"),
        );
    for c in commands {
        let mut sub = clap::Command::new(c.name)
            .about(c.about)
            .after_help(config::keys_help(&c.keys))
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("key = value file; flags override its entries"),
            );
        for d in &c.keys {
            sub = sub.arg(
                Arg::new(d.key)
                    .long(d.flag)
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .help(format!("{} [default: {}] ({})", d.help, d.default, d.key)),
            );
        }
        root = root.subcommand(sub);
    }
    root
}

fn flags(c: &Command, m: &ArgMatches) -> Vec<(&'static str, String)> {
    c.keys
        .iter()
        .filter_map(|d| m.get_one::<String>(d.key).map(|v| (d.key, v.clone())))
        .collect()
}

fn execute(c: &Command, m: &ArgMatches, jobs: usize) -> Result<(), CliError> {
    let file = m.get_one::<PathBuf>("config");
    let cfg = Config::resolve(c.name, &c.keys, file.map(|p| p.as_path()), &flags(c, m))?;
    let mut out = Output {
        dir: PathBuf::from(cfg.str("out")),
        files: Vec::new(),
        jobs,
    };
    std::fs::create_dir_all(&out.dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.dir.display())))?;
    out.write("config.txt", cfg.snapshot())?;

    let start = Instant::now();
    let result = (c.run)(&cfg, &mut out);
    let summary = json!({
        "command": c.name,
        "status": if result.is_ok() { "ok" } else { "error" },
        "exit_code": result.as_ref().err().map_or(0, |e| e.code()),
        "wall_time_s": start.elapsed().as_secs_f64(),
        "outputs": out.files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "error": result.as_ref().err().map(|e| e.to_string()),
    });
    let text = serde_json::to_string_pretty(&summary).expect("json value") + "\n";
    std::fs::write(out.dir.join("run_summary.json"), text)
        .map_err(|e| CliError::Runtime(format!("cannot write run summary: {e}")))?;
    result
}

fn main() -> ExitCode {
    let commands = commands::all();
    let matches = match build(&commands).try_get_matches_from(std::env::args_os()) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let command = commands
        .iter()
        .find(|c| c.name == name)
        .expect("registered subcommand");
    let jobs = sub
        .get_one::<usize>("jobs")
        .copied()
        .unwrap_or_else(default_jobs)
        .max(1);
    match execute(command, sub, jobs) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ctex {name}: {e}");
            ExitCode::from(e.code())
        }
    }
}
