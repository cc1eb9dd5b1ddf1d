//! Run-file parsing and flag/config precedence.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use cf_ensemble::eval::ExperimentConfig;
use serde::{Deserialize, Serialize};

pub const DATA_DIR_VAR: &str = "CFENS_DATA_DIR";

/// Where relative dataset paths are resolved: `$CFENS_DATA_DIR`, else `data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        data_dir().join(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    #[default]
    Both,
}

impl ReportFormat {
    pub fn csv(self) -> bool {
        self != ReportFormat::Json
    }

    pub fn json(self) -> bool {
        self != ReportFormat::Csv
    }
}

impl FromStr for ReportFormat {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "both" => Ok(ReportFormat::Both),
            other => bail!("unknown report format `{other}` (expected csv, json or both)"),
        }
    }
}

/// The `[run]` table of a run file. Every key mirrors a command-line flag;
/// flags win.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    /// Learner seed for models that do not pin their own.
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub format: Option<ReportFormat>,
    pub extended: Option<bool>,
    /// Archive every model fitted on the first split.
    pub save_models: Option<bool>,
}

/// A parsed run file: the experiment, its `[run]` options and an optional
/// `[extended]` experiment that only runs with `--extended`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFile {
    pub options: RunOptions,
    pub experiment: ExperimentConfig,
    pub extended: Option<ExperimentConfig>,
}

impl RunFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).context("malformed TOML")?;
        let options = match table.remove("run") {
            Some(v) => v.try_into().context("invalid [run] table")?,
            None => RunOptions::default(),
        };
        let extended = match table.remove("extended") {
            Some(v) => Some(v.try_into().context("invalid [extended] experiment")?),
            None => None,
        };
        let experiment = toml::Value::Table(table).try_into().context("invalid experiment")?;
        Ok(RunFile { options, experiment, extended })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }
}

/// Options after merging flags over the `[run]` table over defaults.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub seed: Option<u64>,
    pub workers: usize,
    pub format: ReportFormat,
    pub extended: bool,
    pub save_models: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Flags {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub format: Option<String>,
    pub extended: bool,
    pub save_models: bool,
}

impl Resolved {
    pub fn merge(flags: &Flags, file: &RunOptions) -> Result<Self> {
        let format = match &flags.format {
            Some(f) => f.parse()?,
            None => file.format.unwrap_or_default(),
        };
        let workers = flags
            .workers
            .or(file.workers)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if workers == 0 {
            return Err(anyhow!("workers must be at least 1"));
        }
        Ok(Resolved {
            seed: flags.seed.or(file.seed),
            workers,
            format,
            extended: flags.extended || file.extended.unwrap_or(false),
            save_models: flags.save_models || file.save_models.unwrap_or(false),
        })
    }
}

/// Fills unset learner seeds and resolves the dataset path.
pub fn apply(config: &mut ExperimentConfig, seed: Option<u64>) {
    config.dataset.path = resolve_data_path(&config.dataset.path);
    if let Some(seed) = seed {
        for m in &mut config.models {
            m.learner.seed.get_or_insert(seed);
        }
    }
}
