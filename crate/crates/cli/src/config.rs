//! Run configuration files (TOML, `schema_version = 1`).
//!
//! `simulate` reads `[data]` plus one of `[llp]`, `[mil]`, `[pu]`; `train`
//! reads `[input]`, `[train]` and `[output]`. `[train]` accepts any
//! [`TrainConfig`] field and fills the rest from the setting's defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use countloss::trainer::{Setting, TrainConfig};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Config problems map to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub data: DataSource,
    pub llp: Option<LlpSpec>,
    pub mil: Option<MilSpec>,
    pub pu: Option<PuSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Two unit-variance Gaussians, `n / 2` points each; `test_n` adds an
    /// independent test draw.
    Gaussian {
        n: usize,
        dim: usize,
        separation: f64,
        #[serde(default)]
        test_n: Option<usize>,
    },
    /// UCI Adult files; the encoder is fitted on `path`.
    Adult {
        path: PathBuf,
        test_path: Option<PathBuf>,
    },
    /// Instance CSV with a 0/1 `label` column.
    Csv {
        path: PathBuf,
        test_path: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlpSpec {
    pub bag_size: usize,
    pub count: usize,
    pub proportion_range: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MilSpec {
    pub size_mean: f64,
    pub size_std: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PuSpec {
    pub alpha: f64,
    pub c: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub instances: PathBuf,
    pub bags: Option<PathBuf>,
    pub pu_split: Option<PathBuf>,
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainFile {
    pub schema_version: u32,
    pub input: InputSpec,
    pub train: TrainConfig,
    pub output: OutputSpec,
}

fn read_table(path: &Path) -> anyhow::Result<toml::Table> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    match table
        .get("schema_version")
        .and_then(toml::Value::as_integer)
    {
        Some(v) if v == SCHEMA_VERSION as i64 => Ok(table),
        Some(v) => Err(usage(format!(
            "{}: schema_version {v} is not supported (expected {SCHEMA_VERSION})",
            path.display()
        ))),
        None => Err(usage(format!(
            "{}: missing integer field `schema_version`",
            path.display()
        ))),
    }
}

/// Resolves relative paths against the config file's directory.
fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn section<T: serde::de::DeserializeOwned>(
    path: &Path,
    name: &str,
    value: toml::Value,
) -> anyhow::Result<T> {
    value.try_into().map_err(|e: toml::de::Error| {
        usage(format!("{}: in [{name}]: {}", path.display(), e.message()))
    })
}

pub fn load_simulate(path: &Path) -> anyhow::Result<SimulateConfig> {
    let table = read_table(path)?;
    let mut cfg: SimulateConfig = section(path, "root", toml::Value::Table(table))?;
    let chosen = [cfg.llp.is_some(), cfg.mil.is_some(), cfg.pu.is_some()]
        .iter()
        .filter(|&&b| b)
        .count();
    if chosen != 1 {
        bail!(usage(format!(
            "{}: exactly one of [llp], [mil], [pu] is required, found {chosen}",
            path.display()
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    match &mut cfg.data {
        DataSource::Adult { path, test_path } | DataSource::Csv { path, test_path } => {
            resolve(base, path);
            if let Some(t) = test_path {
                resolve(base, t);
            }
        }
        DataSource::Gaussian { .. } => {}
    }
    Ok(cfg)
}

pub fn load_train(path: &Path) -> anyhow::Result<TrainFile> {
    let mut table = read_table(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let take = |table: &mut toml::Table, name: &str| {
        table
            .remove(name)
            .ok_or_else(|| usage(format!("{}: missing section [{name}]", path.display())))
    };
    let mut input: InputSpec = section(path, "input", take(&mut table, "input")?)?;
    let mut output: OutputSpec = section(path, "output", take(&mut table, "output")?)?;
    let train_table = match take(&mut table, "train")? {
        toml::Value::Table(t) => t,
        _ => bail!(usage(format!(
            "{}: [train] must be a table",
            path.display()
        ))),
    };
    table.remove("schema_version");
    if let Some(key) = table.keys().next() {
        bail!(usage(format!(
            "{}: unknown top-level field `{key}`",
            path.display()
        )));
    }

    let setting: Setting = section(
        path,
        "train",
        train_table
            .get("setting")
            .cloned()
            .ok_or_else(|| usage(format!("{}: missing field `train.setting`", path.display())))?,
    )?;
    let mut merged = serde_json::to_value(TrainConfig::new(setting))?;
    let overrides = serde_json::to_value(&train_table)?;
    if let (Some(m), Some(o)) = (merged.as_object_mut(), overrides.as_object()) {
        for (k, v) in o {
            m.insert(k.clone(), v.clone());
        }
    }
    let train: TrainConfig = serde_json::from_value(merged)
        .map_err(|e| usage(format!("{}: in [train]: {e}", path.display())))?;

    resolve(base, &mut input.instances);
    for p in [&mut input.bags, &mut input.pu_split].into_iter().flatten() {
        resolve(base, p);
    }
    resolve(base, &mut output.dir);
    Ok(TrainFile {
        schema_version: SCHEMA_VERSION,
        input,
        train,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("c.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn train_config_merges_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "schema_version = 1\n[input]\ninstances = \"x.csv\"\nbags = \"b.jsonl\"\n[train]\nsetting = \"mil\"\nepochs = 3\n[output]\ndir = \"run\"\n",
        );
        let cfg = load_train(&p).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.hidden, TrainConfig::new(Setting::Mil).hidden);
        assert_eq!(cfg.input.instances, dir.path().join("x.csv"));
        assert!(cfg.input.standardize);
    }

    #[test]
    fn schema_violations_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "schema_version = 1\n[input]\ninstances = \"x.csv\"\n[train]\nsetting = \"llp\"\nepoch = 3\n[output]\ndir = \"run\"\n",
        );
        let err = load_train(&p).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        assert!(err.to_string().contains("epoch"), "{err}");

        let p = write(dir.path(), "schema_version = 2\n");
        assert!(load_train(&p)
            .unwrap_err()
            .to_string()
            .contains("schema_version"));

        let p = write(
            dir.path(),
            "schema_version = 1\n[data]\nsource = \"gaussian\"\nn = 10\ndim = 2\nseparation = 1.0\n",
        );
        assert!(load_simulate(&p)
            .unwrap_err()
            .to_string()
            .contains("exactly one"));
    }
}
