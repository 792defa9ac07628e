//! `--config FILE`: a flat TOML file of `key = value` lines whose keys are
//! the subcommand's long flag names (`_` and `-` are interchangeable).
//! The file is expanded into flags placed before the real ones, and every
//! flag may be repeated with the last occurrence winning, so command-line
//! flags override the file.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::{CliError, CliResult};

/// Name of the echoed, fully resolved configuration.
pub const RESOLVED_CONFIG: &str = "config.toml";

fn config_path(args: &[OsString]) -> CliResult<Option<OsString>> {
    for (i, a) in args.iter().enumerate().skip(2) {
        let s = a.to_string_lossy();
        if s == "--config" {
            return args
                .get(i + 1)
                .cloned()
                .map(Some)
                .ok_or_else(|| CliError::Usage("--config needs a file".into()));
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Ok(Some(p.into()));
        }
    }
    Ok(None)
}

fn flags_from_table(table: toml::Table) -> CliResult<Vec<OsString>> {
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" {
            return Err(CliError::Usage("a config file cannot name another config file".into()));
        }
        let text = match value {
            toml::Value::String(s) => s,
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(true) => {
                out.push(flag.into());
                continue;
            }
            toml::Value::Boolean(false) => continue,
            toml::Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    toml::Value::String(s) => Ok(s.clone()),
                    toml::Value::Integer(i) => Ok(i.to_string()),
                    toml::Value::Float(f) => Ok(f.to_string()),
                    other => Err(CliError::Usage(format!("{key}: unsupported list item {other}"))),
                })
                .collect::<CliResult<Vec<_>>>()?
                .join(","),
            other => return Err(CliError::Usage(format!("{key}: unsupported value {other}"))),
        };
        out.push(flag.into());
        out.push(text.into());
    }
    Ok(out)
}

/// Splices the flags of a `--config` file in right after the subcommand.
pub fn expand_config_args(args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let Some(path) = config_path(&args)? else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", Path::new(&path).display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Usage(format!("config {}: {e}", Path::new(&path).display())))?;
    let flags = flags_from_table(table)?;
    let mut out = args[..2].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}

/// Writes `resolved` as TOML to `dir/config.toml`.
pub fn echo(dir: &Path, resolved: &impl Serialize) -> CliResult {
    let text = toml::to_string(resolved).map_err(|e| CliError::Usage(format!("cannot record the configuration: {e}")))?;
    fs::write(dir.join(RESOLVED_CONFIG), text)?;
    Ok(())
}
