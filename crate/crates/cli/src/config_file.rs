//! `key=value` config files, spliced into the argument list as flags.
//!
//! The file's flags go right after the subcommand name, ahead of everything
//! typed on the command line, so an explicit flag overrides the file.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgAction, CommandFactory};

use crate::args::Cli;
use crate::error::{CliError, Result};

/// Value of the first `--config` flag, if any.
fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            return None;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Parses the file into `--key value` flags valid for `subcommand`.
pub fn flags_from_file(path: &Path, subcommand: &str) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let cli = Cli::command();
    let sub = cli
        .find_subcommand(subcommand)
        .ok_or_else(|| CliError::Usage(format!("unknown subcommand {subcommand:?}")))?;
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| CliError::Config(format!("{}:{}: {msg}", path.display(), no + 1));
        let (key, value) = line.split_once('=').ok_or_else(|| at("expected key=value".into()))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key == "config" {
            return Err(at("config files cannot include other config files".into()));
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) || a.get_all_aliases().unwrap_or_default().contains(&key.as_str()))
            .ok_or_else(|| at(format!("`{key}` is not a flag of {subcommand}")))?;
        let flag = OsString::from(format!("--{}", arg.get_long().unwrap_or(&key)));
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" => out.push(flag),
                "false" | "no" | "0" => {}
                _ => return Err(at(format!("`{key}` takes true or false, got {value:?}"))),
            }
        } else {
            out.push(flag);
            out.push(OsString::from(value));
        }
    }
    Ok(out)
}

/// Returns `argv` with the config file's flags inserted after the subcommand.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let Some(pos) = argv.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
        return Ok(argv);
    };
    let pos = pos + 1;
    let sub = argv[pos].to_string_lossy().into_owned();
    let flags = flags_from_file(&path, &sub)?;
    let mut out = argv[..=pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}
