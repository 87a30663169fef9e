//! Run configuration: TOML file merged under command-line flags.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use halloc_core::gateway::{BackendKind, GatewayConfig};
use halloc_core::HType;
use serde::Deserialize;

/// A problem with flags, config files or input paths (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub backend: Option<BackendKind>,
    pub jobs: Option<usize>,
    pub templates: Option<PathBuf>,
    pub types: Option<Vec<String>>,
    #[serde(default)]
    pub gateway: Option<GatewayConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }
}

/// Global settings after merging flags over the config file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub templates: Option<PathBuf>,
    pub types: BTreeSet<HType>,
    pub gateway: GatewayConfig,
}

pub struct Flags {
    pub seed: Option<u64>,
    pub backend: Option<BackendKind>,
    pub jobs: Option<usize>,
    pub templates: Option<PathBuf>,
    pub types: Option<Vec<String>>,
    pub config: Option<PathBuf>,
}

pub fn parse_types(items: &[String]) -> anyhow::Result<BTreeSet<HType>> {
    let mut out = BTreeSet::new();
    for item in items.iter().flat_map(|s| s.split(',')).filter(|s| !s.trim().is_empty()) {
        out.insert(item.parse::<HType>().map_err(config_err)?);
    }
    if out.is_empty() {
        return Err(config_err("--types selects no hallucination type"));
    }
    Ok(out)
}

impl RunConfig {
    pub fn resolve(flags: Flags) -> anyhow::Result<Self> {
        let file = match &flags.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let mut gateway = file.gateway.unwrap_or_default();
        if let Some(b) = flags.backend.or(file.backend) {
            gateway.backend = b;
        }
        let seed = flags.seed.or(file.seed).unwrap_or(0);
        gateway.seed = seed;
        gateway
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        let jobs = flags
            .jobs
            .or(file.jobs)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from));
        if jobs == 0 {
            return Err(config_err("--jobs must be at least 1"));
        }
        let templates = flags.templates.or(file.templates);
        if let Some(t) = &templates {
            if !t.is_dir() {
                return Err(config_err(format!("template directory {} does not exist", t.display())));
            }
        }
        let types = match flags.types.or(file.types) {
            Some(items) => parse_types(&items)?,
            None => HType::ALL.into_iter().collect(),
        };
        Ok(RunConfig {
            seed,
            jobs,
            templates,
            types,
            gateway,
        })
    }
}

/// Fails with a configuration error unless every path is an existing file.
pub fn require_files(paths: &[&Path]) -> anyhow::Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(config_err(format!("input file {} does not exist", p.display())));
        }
    }
    Ok(())
}

pub fn require_dir(path: &Path) -> anyhow::Result<()> {
    if !path.is_dir() {
        return Err(config_err(format!("directory {} does not exist", path.display())));
    }
    Ok(())
}
