//! Run config files: a JSON object whose keys are the flag names in
//! snake_case. Top-level keys apply to every subcommand; an object under a
//! subcommand's name (`"falsify": {...}`) overrides them for that command.
//! Relative paths are taken relative to the config file.

use std::path::Path;

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub const SUBCOMMANDS: [&str; 5] = ["calibrate", "cluster", "falsify", "report", "gen_synthetic"];

/// Keys holding file system paths.
const PATH_KEYS: [&str; 8] = [
    "dataset",
    "bounds",
    "clusters",
    "out",
    "registry",
    "features",
    "features_out",
    "in",
];

pub fn load(path: &Path, subcommand: &str) -> anyhow::Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    let Value::Object(mut top) = value else {
        bail!("config {} must hold a JSON object", path.display());
    };
    let section = top.remove(subcommand);
    top.retain(|k, _| !SUBCOMMANDS.contains(&k.as_str()));
    match section {
        Some(Value::Object(s)) => top.extend(s),
        Some(_) => bail!(
            "`{subcommand}` section of {} must be an object",
            path.display()
        ),
        None => {}
    }
    let base = path.parent().unwrap_or(Path::new("."));
    for key in PATH_KEYS {
        if let Some(Value::String(p)) = top.get_mut(key) {
            if Path::new(p.as_str()).is_relative() {
                *p = base.join(&*p).to_string_lossy().into_owned();
            }
        }
    }
    Ok(top)
}

/// Flag values win; the file fills in whatever was not given.
pub fn merge<T: Serialize + DeserializeOwned>(
    flags: T,
    file: Option<Map<String, Value>>,
) -> anyhow::Result<T> {
    let Some(mut merged) = file else {
        return Ok(flags);
    };
    let Value::Object(given) = serde_json::to_value(&flags)? else {
        bail!("arguments must serialize to an object");
    };
    merged.extend(given.into_iter().filter(|(_, v)| !v.is_null()));
    serde_json::from_value(Value::Object(merged)).context("invalid value in config file")
}

pub fn required<T>(v: Option<T>, name: &str) -> anyhow::Result<T> {
    match v {
        Some(v) => Ok(v),
        None => bail!(
            "missing --{} (or `{}` in the config file)",
            name.replace('_', "-"),
            name
        ),
    }
}
