//! Experiment configuration: TOML loading, `key=value` overrides, hashing.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rwre_core::environment::EnvironmentSpec;
use rwre_core::lattice::Direction;

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Regen,
    EstimateT,
    Kalikow,
    Renorm,
    Clt,
    MixingOracle,
    Tails,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Regen => "regen",
            ExperimentKind::EstimateT => "estimate-t",
            ExperimentKind::Kalikow => "kalikow",
            ExperimentKind::Renorm => "renorm",
            ExperimentKind::Clt => "clt",
            ExperimentKind::MixingOracle => "mixing-oracle",
            ExperimentKind::Tails => "tails",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionConfig {
    /// Integer representative of the direction.
    pub l: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub master: u64,
    #[serde(default = "one")]
    pub replications: usize,
}

fn one() -> usize {
    1
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            master: 0,
            replications: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub direction: Option<DirectionConfig>,
    #[serde(default)]
    pub parameters: toml::Table,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "one")]
    pub workers: usize,
}

impl ExperimentConfig {
    /// The configured direction, `e₁` when absent.
    pub fn direction(&self) -> Result<Direction> {
        match &self.direction {
            Some(d) => {
                if d.l.len() != self.environment.dim {
                    return Err(LabError::config("direction.l", "dimension differs from environment.dim"));
                }
                Direction::from_integer(&d.l).map_err(|e| LabError::config("direction.l", e.to_string()))
            }
            None => Ok(Direction::axis(self.environment.dim, 0)),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output
            .clone()
            .unwrap_or_else(|| PathBuf::from("results").join(self.experiment.name()))
    }

    /// Experiment parameters, with unknown keys and type errors reported
    /// under `parameters.<path>`.
    pub fn parameters<T: DeserializeOwned>(&self) -> Result<T> {
        let v = toml::Value::Table(self.parameters.clone());
        serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "parameters".to_string() } else { format!("parameters.{path}") };
            LabError::config(field, e.into_inner().to_string())
        })
    }
}

/// A parsed configuration together with the resolved table it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub table: toml::Table,
    pub hash: String,
}

/// Reads a config file and applies `key=value` overrides.
pub fn load(path: &Path, overrides: &[String]) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse(&text, overrides)
}

pub fn parse(text: &str, overrides: &[String]) -> Result<LoadedConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| LabError::config("<config>", e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let config: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table.clone())).map_err(|e| {
        let path = e.path().to_string();
        LabError::config(if path == "." { "<config>".into() } else { path }, e.into_inner().to_string())
    })?;
    if config.workers == 0 {
        return Err(LabError::config("workers", "must be at least 1"));
    }
    if config.seeds.replications == 0 {
        return Err(LabError::config("seeds.replications", "must be at least 1"));
    }
    let hash = config_hash(&table);
    Ok(LoadedConfig { config, table, hash })
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string
/// when it does not parse.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| LabError::config(assignment, "override must have the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(LabError::config(key, "malformed override key"));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for (i, p) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| LabError::config(parts[..=i].join("."), "not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// SHA-256 of the resolved configuration with the scheduling-only keys
/// (`workers`, `output`) removed, so that the hash names the statistics.
pub fn config_hash(table: &toml::Table) -> String {
    let mut t = table.clone();
    t.remove("workers");
    t.remove("output");
    let canonical = toml::to_string(&t).expect("tables serialize");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
experiment = "simulate"
workers = 2

[environment]
kind = "homogeneous"
dim = 2
kappa = 0.05
vector = [0.4, 0.1, 0.25, 0.25]

[parameters]
n = 5000
"#;

    #[test]
    fn parses_and_overrides() {
        let c = parse(BASE, &["parameters.n=7000".into(), "seeds.master=9".into()]).unwrap();
        assert_eq!(c.config.experiment, ExperimentKind::Simulate);
        assert_eq!(c.config.parameters["n"].as_integer(), Some(7000));
        assert_eq!(c.config.seeds.master, 9);
        assert_eq!(c.config.direction().unwrap().l_int, vec![1, 0]);
    }

    #[test]
    fn hash_ignores_workers_and_output() {
        let a = parse(BASE, &[]).unwrap();
        let b = parse(BASE, &["workers=4".into(), "output=\"elsewhere\"".into()]).unwrap();
        assert_eq!(a.hash, b.hash);
        let c = parse(BASE, &["parameters.n=1".into()]).unwrap();
        assert_ne!(a.hash, c.hash);
        assert_eq!(a.hash.len(), 64);
    }

    #[test]
    fn errors_name_field_paths() {
        let e = parse(BASE, &["environment.kappa=\"x\"".into()]).unwrap_err();
        assert!(e.to_string().contains("environment.kappa"), "{e}");
        let e = parse(BASE, &["bogus=1".into()]).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = parse(BASE, &["workers=0".into()]).unwrap_err();
        assert!(e.to_string().contains("workers"), "{e}");
        assert!(parse(BASE, &["noequals".into()]).is_err());
        assert!(parse(BASE, &["experiment.x=1".into()]).is_err());
    }

    #[test]
    fn string_fallback_for_bare_values() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "a.b=hello").unwrap();
        assert_eq!(t["a"]["b"].as_str(), Some("hello"));
        apply_override(&mut t, "a.c=[1, 2]").unwrap();
        assert_eq!(t["a"]["c"].as_array().unwrap().len(), 2);
    }
}
