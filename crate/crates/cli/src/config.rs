//! Resolved run configuration: defaults, then the TOML file, then the seed
//! flag, then `key=value` overrides.

use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use lhuc_core::pipeline::ExperimentConfig;
use toml::{Table, Value};

/// A configuration problem; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub fn resolve(path: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())).map_err(|e| config_err(format!("{e:#}")))?;
            text.parse::<Table>().map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    // Parse the file alone first so unknown keys are reported against it.
    let base: ExperimentConfig = Value::Table(table.clone()).try_into().map_err(|e| config_err(format!("config: {e}")))?;
    if let Some(s) = seed {
        let seeded = base.with_seed(s);
        table = Table::try_from(&seeded).map_err(|e| config_err(e.to_string()))?;
    }
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| config_err(format!("override {o:?} is not key=value")))?;
        set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
    }
    let cfg: ExperimentConfig = Value::Table(table).try_into().map_err(|e| config_err(format!("config: {e}")))?;
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(cfg)
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}").parse::<Table>().ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| config_err(format!("override key {key:?}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    Ok(toml::to_string_pretty(cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = resolve(None, Some(7), &["two_pass.adapt.learning_rate=0.05".into(), "two_pass.ranking=raw_att".into()]).unwrap();
        assert_eq!(cfg.two_pass.adapt.learning_rate, 0.05);
        assert_eq!(cfg.corpus.seed, 7);
        assert_eq!(cfg.two_pass.ranking, lhuc_core::adaptation::RankingMode::RawAtt);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = resolve(None, None, &["two_pass.adapt.lerning_rate=0.05".into()]).unwrap_err();
        assert!(e.downcast_ref::<ConfigError>().is_some());
        let e = resolve(None, None, &["nonsense".into()]).unwrap_err();
        assert!(e.downcast_ref::<ConfigError>().is_some());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = resolve(None, Some(3), &["two_pass.adapt.selection_percentile=80".into()]).unwrap();
        let text = to_toml(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
