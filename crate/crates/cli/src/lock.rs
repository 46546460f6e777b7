use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::args::Command;
use crate::error::{CliError, Context, Result};

pub const LOCK_FILE: &str = "config.lock";

/// Effective parameters of one command. Thread count is left out: outputs do
/// not depend on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigLock {
    pub tool: String,
    pub version: String,
    #[serde(flatten)]
    pub command: Command,
}

fn out_dir(cmd: &Command) -> Option<&Path> {
    Some(match cmd {
        Command::Synth(a) => &a.out,
        Command::Aggregate(a) => &a.out,
        Command::Pool(a) => &a.out,
        Command::Codebook(a) => &a.out,
        Command::Index(a) => &a.out,
        Command::Quantize(a) => &a.out,
        Command::Search(a) => &a.out,
        Command::Eval(a) => &a.out,
        Command::Replay(_) => return None,
    })
}

pub(crate) fn write_lock(cmd: &Command) -> Result<()> {
    let Some(dir) = out_dir(cmd) else {
        return Ok(());
    };
    let lock = ConfigLock {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cmd.clone(),
    };
    let path = dir.join(LOCK_FILE);
    let mut text = serde_json::to_string_pretty(&lock).map_err(tokenrank::Error::from)?;
    text.push('\n');
    fs::write(&path, text).context(|| format!("writing {}", path.display()))
}

pub fn read_lock(path: &Path) -> Result<ConfigLock> {
    let text = fs::read_to_string(path).context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: not a config.lock: {e}", path.display())))
}

pub(crate) fn lock_path(dir: &Path) -> PathBuf {
    dir.join(LOCK_FILE)
}
