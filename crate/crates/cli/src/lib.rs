//! Library behind the `star` binary: argument types, config-file handling
//! and one function per subcommand.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error (missing or
//! malformed dataset, checkpoint or run files), 4 runtime error (training
//! or evaluation failed, or some `compare` jobs failed).

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

use args::{Cli, Command};
use error::CliResult;

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Generate(a) => commands::generate(a).map(|_| ()),
        Command::Train(a) => commands::train(a).map(|o| println!("{}", o.run_dir.display())),
        Command::Eval(a) => commands::eval(a).map(|r| print!("{}", commands::report_table(&r))),
        Command::ExportClusters(a) => commands::export_clusters(a).map(|_| ()),
        Command::Compare(a) => commands::compare(a).map(|o| print!("{}", commands::summary_table(&o.rows))),
    }
}
