//! `tmeseg`: batch front end for teacher aggregation, post-processing,
//! evaluation, counting and tumor-microenvironment analytics.

mod args;
mod commands;
mod provenance;

use std::process::ExitCode;

use clap::{CommandFactory, Parser};

use crate::args::Cli;
use crate::commands::Usage;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

fn command_list() -> String {
    let mut out = String::from("Commands:\n");
    for sub in Cli::command().get_subcommands().filter(|s| s.get_name() != "help") {
        let about = sub.get_about().map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("  {:<12} {about}\n", sub.get_name()));
    }
    out
}

fn synopsis() -> String {
    format!("{}\n\n{}", Cli::command().render_usage(), command_list())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprint!("\n{}", command_list());
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<Usage>().is_some() => {
            eprint!("error: {e}\n\n{}", synopsis());
            ExitCode::from(EXIT_USAGE)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
