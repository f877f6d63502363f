//! `clutter4d` command line: one pipeline stage per subcommand.

mod commands;
mod config;
mod error;

use clap::{Arg, ArgAction, Command};

use commands::COMMANDS;
use config::{opt, Key, RunConfig};
use error::{CliError, Result};

fn common_keys() -> Vec<Key> {
    vec![opt("threads", "1", "worker thread cap")]
}

fn cli() -> Command {
    let mut app = Command::new("clutter4d")
        .about("4D clutter filtering toolkit for contrast-enhanced ultrasound")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for c in &COMMANDS {
        let mut sub = Command::new(c.name).about(c.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("start from a resolved config written by an earlier run"),
        );
        for k in (c.keys)().into_iter().chain(common_keys()) {
            let help = match k.default {
                Some(d) if !d.is_empty() => format!("{} [default: {d}]", k.help),
                _ => k.help.to_string(),
            };
            sub = sub.arg(
                Arg::new(k.name)
                    .long(k.name)
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .allow_hyphen_values(true)
                    .help(help),
            );
        }
        app = app.subcommand(sub);
    }
    app
}

fn run(args: Vec<String>) -> Result<()> {
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::config(e.render().to_string().trim_end().trim_start_matches("error: "))),
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let cmd = COMMANDS.iter().find(|c| c.name == name).expect("registered subcommand");
    let keys: Vec<Key> = (cmd.keys)().into_iter().chain(common_keys()).collect();
    let flags: Vec<(String, String)> = keys
        .iter()
        .filter_map(|k| sub.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    let file = sub.get_one::<String>("config").map(std::path::PathBuf::from);
    let cfg = RunConfig::resolve(name, &keys, file.as_deref(), |k| std::env::var(k).ok(), &flags)?;
    let threads: usize = cfg.get("threads")?;
    if threads == 0 {
        return Err(CliError::config("threads must be at least 1"));
    }
    if threads > 1 {
        log::warn!("this build runs single-threaded; --threads {threads} only caps parallelism");
    }
    (cmd.run)(&cfg)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(std::env::args().collect()) {
        eprintln!("clutter4d: {e}");
        std::process::exit(e.category.exit_code());
    }
}
