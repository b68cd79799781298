//! The `factsurv` command-line tool.
//!
//! Every subcommand writes a [`manifest::RunManifest`] before it exits,
//! whether it succeeded or not. Failures map to exit codes 2 through 9 via
//! [`error::Category`] and print one `error[<category>]: <message>` line.
// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod args;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod output;
mod svg;

use std::path::PathBuf;

use args::{Cli, Command};
pub use error::{Category, CliError, Result};
use manifest::{RunManifest, MANIFEST_FILE};

/// Where the manifest of `command` goes: inside the output directory, or
/// next to a single output file.
pub fn manifest_path(command: &Command) -> PathBuf {
    match command {
        Command::Synth(a) => commands::sibling(&a.out, "manifest.json"),
        Command::Attention(a) => commands::sibling(&a.out, "manifest.json"),
        Command::Prep(a) => a.out.join(MANIFEST_FILE),
        Command::Km(a) => a.out.join(MANIFEST_FILE),
        Command::Fit(a) => a.out.join(MANIFEST_FILE),
        Command::Eval(a) => a.out.join(MANIFEST_FILE),
        Command::Grid(a) => a.out.join(MANIFEST_FILE),
        Command::Ablate(a) => a.out.join(MANIFEST_FILE),
    }
}

/// Runs one parsed command line and records it in a manifest.
pub fn run(cli: &Cli, argv: Vec<String>) -> Result<()> {
    let mut m = RunManifest::start(cli.command.name(), argv);
    m.seed = cli.seed;
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a, cli.seed, &mut m),
        Command::Prep(a) => commands::prep(a, &mut m),
        Command::Km(a) => commands::km(a, &mut m),
        Command::Fit(a) => commands::fit(a, cli.seed, &mut m),
        Command::Eval(a) => commands::eval(a, &mut m),
        Command::Grid(a) => commands::grid(a, cli.seed, &mut m),
        Command::Ablate(a) => commands::ablate(a, cli.seed, &mut m),
        Command::Attention(a) => commands::attention(a, &mut m),
    };
    m.finish(result.as_ref().map(|_| ()));
    let path = manifest_path(&cli.command);
    if let Err(e) = m.write(&path) {
        log::error!("could not write the run manifest: {e}");
        return result.and(Err(e));
    }
    result
}
