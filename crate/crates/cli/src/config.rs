//! Run configuration: command defaults, overlaid by a TOML file, overlaid
//! by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unveil_core::{FieldConfig, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Run directory name under `runs_dir`.
    pub name: String,
    pub runs_dir: PathBuf,
    /// Dataset directory (low-light images plus manifest).
    pub data: Option<PathBuf>,
    pub threads: Option<usize>,
    pub field: FieldConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            runs_dir: PathBuf::from("runs"),
            data: None,
            threads: None,
            field: FieldConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Flags shared by the commands that build a [`RunConfig`].
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigFlags {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concealing degree.
    #[arg(long, allow_negative_numbers = true)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Patch size, `N` or `WxH`.
    #[arg(long, value_parser = parse_patch)]
    pub patch: Option<(usize, usize)>,
    /// Samples per ray.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub threads: Option<usize>,
}

pub fn parse_patch(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad patch size {s:?}"))
    };
    match s.split_once(['x', 'X']) {
        Some((w, h)) => Ok((parse(w)?, parse(h)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

/// Recursively overwrites `base` with the entries of `over`.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Overlays the TOML file at `path` on `defaults`.
pub fn load_over(defaults: &RunConfig, path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    let file: toml::Value = toml::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {}", path.display(), one_line(&e))))?;
    let mut base = toml::Value::try_from(defaults).map_err(|e| CliError::config(e.to_string()))?;
    merge(&mut base, file);
    base.try_into().map_err(|e: toml::de::Error| {
        CliError::config(format!("{}: {}", path.display(), one_line(&e)))
    })
}

fn one_line(e: &impl std::fmt::Display) -> String {
    e.to_string()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl RunConfig {
    /// Resolves defaults, the optional config file and the flags, in
    /// increasing order of precedence, and validates the result.
    pub fn resolve(defaults: RunConfig, flags: &ConfigFlags) -> Result<RunConfig, CliError> {
        let mut cfg = match &flags.config {
            Some(path) => load_over(&defaults, path)?,
            None => defaults,
        };
        if let Some(seed) = flags.seed {
            cfg.train.seed = seed;
        }
        if let Some(eta) = flags.eta {
            cfg.train.weights.eta = eta;
        }
        if let Some(iters) = flags.iters {
            cfg.train.iters = iters;
        }
        if let Some((w, h)) = flags.patch {
            cfg.train.patch_w = w;
            cfg.train.patch_h = h;
        }
        if let Some(n) = flags.samples {
            cfg.field.n_samples = n;
        }
        if flags.threads.is_some() {
            cfg.threads = flags.threads;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.field.validate()?;
        self.train.validate()?;
        if self.threads == Some(0) {
            return Err(CliError::config("threads must be >= 1"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == ".." {
            return Err(CliError::config(format!(
                "invalid run name {:?}",
                self.name
            )));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.name)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::config(e.to_string()))
    }
}

/// Configures the global worker pool. Must run before any parallel work.
pub fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    Ok(())
}
