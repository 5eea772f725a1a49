//! Experiment configuration: a TOML file plus `--set key.path=value`
//! overrides, deserialized strictly into [`ExperimentConfig`].

use std::fmt;
use std::path::{Path, PathBuf};

use irdistill_core::experiment::ExperimentConfig;
use irdistill_core::io::sha256_hex;
use toml::{Table, Value};

/// Environment variable overriding the output root.
pub const OUTPUT_ROOT_ENV: &str = "IRDISTILL_OUTPUT_ROOT";

/// Invalid configuration or arguments; the process exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}

/// Reads, overrides, deserializes and validates a configuration. Without a
/// file the defaults are used.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, UsageError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
        let at = e.path().to_string();
        if at == "." {
            usage(format!("config: {}", e.inner()))
        } else {
            usage(format!("config field `{at}`: {}", e.inner()))
        }
    })?;
    cfg.validate().map_err(|e| usage(format!("config: {e}")))?;
    Ok(cfg)
}

/// Sets `a.b.c=value`. The value is parsed as a TOML value and taken as a
/// plain string when that fails.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), UsageError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("override {spec:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("override {spec:?} has an empty key segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| usage(format!("override {spec:?}: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Hash of the resolved configuration, ignoring where outputs go.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let cfg = ExperimentConfig {
        output_dir: None,
        ..cfg.clone()
    };
    sha256_hex(&serde_json::to_vec(&cfg).expect("config serializes"))
}

/// Output root: the environment override, then `output_dir`, then `runs`.
pub fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_sections_and_parse_types() {
        let mut t = Table::new();
        apply_override(&mut t, "teacher.hidden=48").unwrap();
        apply_override(&mut t, "preset=inherit").unwrap();
        apply_override(&mut t, "data.query_overlap = 0.5").unwrap();
        assert_eq!(t["teacher"]["hidden"].as_integer(), Some(48));
        assert_eq!(t["preset"].as_str(), Some("inherit"));
        assert_eq!(t["data"]["query_overlap"].as_float(), Some(0.5));
    }

    #[test]
    fn override_through_scalar_is_rejected() {
        let mut t = Table::new();
        apply_override(&mut t, "seed=3").unwrap();
        assert!(apply_override(&mut t, "seed.x=1").is_err());
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "a..b=1").is_err());
    }

    #[test]
    fn unknown_field_names_its_path() {
        let err = load(None, &["teacher.hiddn=3".into()]).unwrap_err();
        assert!(err.0.contains("teacher"), "{err}");
        assert!(err.0.contains("hiddn"), "{err}");
    }

    #[test]
    fn wrong_type_names_its_path() {
        let err = load(None, &["student_train.steps=\"many\"".into()]).unwrap_err();
        assert!(err.0.contains("student_train.steps"), "{err}");
    }

    #[test]
    fn semantic_validation_is_a_usage_error() {
        assert!(load(None, &["data.n_train=100000".into()]).is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = load(None, &[]).unwrap();
        let b = load(None, &["output_dir=elsewhere".into()]).unwrap();
        let c = load(None, &["seed=1".into()]).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&c));
    }
}
