//! Config files supply flag values: top-level keys apply to any command
//! that has a flag of that name, a table named after the command applies
//! to that command only. Flags given on the command line win.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context};
use clap::Command;
use serde_json::Value;

pub fn load(path: &Path) -> anyhow::Result<serde_json::Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text)?,
        _ => {
            let table: toml::Table = toml::from_str(&text)?;
            serde_json::to_value(table)?
        }
    };
    match value {
        Value::Object(map) => Ok(map),
        _ => bail!("config {} is not a table", path.display()),
    }
}

/// Finds `--config <path>` or `--config=<path>` before parsing.
pub fn find_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(rest.into());
        }
    }
    None
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Turns config entries for `sub` into arguments that are placed right
/// after the subcommand name, so explicit flags later on override them.
pub fn inject(
    args: Vec<OsString>,
    cmd: &Command,
    config: &serde_json::Map<String, Value>,
) -> anyhow::Result<Vec<OsString>> {
    let Some(pos) = args
        .iter()
        .skip(1)
        .position(|a| cmd.find_subcommand(a.to_string_lossy().as_ref()).is_some())
        .map(|p| p + 1)
    else {
        return Ok(args);
    };
    let name = args[pos].to_string_lossy().into_owned();
    let sub = cmd.find_subcommand(&name).expect("found above");
    let mut entries: Vec<(&String, &Value)> = config.iter().filter(|(_, v)| !v.is_object()).collect();
    if let Some(Value::Object(table)) = config.get(&name) {
        entries.extend(table.iter());
    }

    let mut extra = Vec::new();
    for (key, value) in entries {
        let long = key.replace('_', "-");
        if long == "config" {
            continue;
        }
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(long.as_str())) else {
            if config.get(&name).and_then(|t| t.get(key)).is_some() {
                bail!("config key `{key}` is not a flag of `{name}`");
            }
            continue;
        };
        let flag = format!("--{long}");
        let takes_value = arg.get_action().takes_values();
        match value {
            Value::Bool(b) if !takes_value => {
                if *b {
                    extra.push(flag.into());
                }
            }
            Value::Array(items) => {
                let parts: Vec<String> = items
                    .iter()
                    .map(|v| scalar(v).with_context(|| format!("config key `{key}` has a nested value")))
                    .collect::<anyhow::Result<_>>()?;
                extra.push(format!("{flag}={}", parts.join(",")).into());
            }
            v => {
                let s = scalar(v).with_context(|| format!("config key `{key}` has an unsupported value"))?;
                extra.push(format!("{flag}={s}").into());
            }
        }
    }
    let mut out = args;
    out.splice(pos + 1..pos + 1, extra);
    Ok(out)
}
