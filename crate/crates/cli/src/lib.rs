//! The `tokenrank` batch pipeline.
//!
//! Every command writes its outputs and a `config.lock` echoing the effective
//! parameters into `--out`. `tokenrank replay <config.lock>` re-runs it.

pub mod args;
mod commands;
mod error;
mod lock;

pub use args::{Cli, Command};
pub use error::{CliError, Result};
pub use lock::{read_lock, ConfigLock, LOCK_FILE};

use tokenrank::par;

/// Run one command, inside a pool of `threads` workers when given.
pub fn run(cli: Cli) -> Result<()> {
    match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => par::with_threads(n, || dispatch(&cli.command)),
        None => dispatch(&cli.command),
    }
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => commands::synth(a)?,
        Command::Aggregate(a) => commands::aggregate(a)?,
        Command::Pool(a) => commands::pool(a)?,
        Command::Codebook(a) => commands::codebook(a)?,
        Command::Index(a) => commands::index(a)?,
        Command::Quantize(a) => commands::quantize(a)?,
        Command::Search(a) => commands::search(a)?,
        Command::Eval(a) => commands::eval(a)?,
        Command::Replay(a) => {
            let lock = read_lock(&a.lock)?;
            if matches!(lock.command, Command::Replay(_)) {
                return Err(CliError::Usage("a config.lock cannot replay another lock".into()));
            }
            return dispatch(&lock.command);
        }
    }
    lock::write_lock(cmd)
}
