//! Run configuration: a TOML file, then `section.key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use shrinknet::experiment::ExperimentConfig;
use toml::{Table, Value};

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()))
}

/// Applies `a.b.c=value`; the value is read as a TOML literal and falls
/// back to a bare string.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override {assignment:?} is not of the form key=value");
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = path.split_last().expect("split yields at least one item");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override {assignment:?}: {p:?} is not a section"))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<Table>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let config: ExperimentConfig = Value::Table(table).try_into().context("invalid configuration")?;
    config.validate()?;
    Ok(config)
}

pub fn resolve_data_path(config: &ExperimentConfig, data_dir: &Path) -> PathBuf {
    if config.data.path.is_absolute() {
        config.data.path.clone()
    } else {
        data_dir.join(&config.data.path)
    }
}
