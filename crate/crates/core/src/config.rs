//! Run configuration: one TOML file with a section per component, plus
//! `key=value` overrides addressed by dotted path (`train.mode`) or by a bare
//! key (`mode`). A bare key must be unique across sections, except that the
//! `train` section wins when it has the key.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::flow_net::FlowNetConfig;
use crate::losses::LossWeights;
use crate::roi::{DiscriminatorConfig, RoiProviderConfig};
use crate::synthesis::{FeatureExtractorConfig, SynthesisConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Defaults to a sibling `<root>_hires` directory when present.
    pub hires_root: Option<PathBuf>,
    pub stride: usize,
    pub limit_per_clip: Option<usize>,
    /// Further roots for mixed corpora, indexed after `root`.
    pub extra_sources: Vec<DataSource>,
    /// The last `holdout` triplets of the index are kept for evaluation.
    pub holdout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data/frames"),
            hires_root: None,
            stride: 1,
            limit_per_clip: None,
            extra_sources: Vec::new(),
            holdout: 0,
        }
    }
}

impl DataConfig {
    pub fn sources(&self) -> Vec<DataSource> {
        let mut v = vec![DataSource {
            root: self.root.clone(),
            hires_root: self.hires_root.clone(),
            stride: self.stride,
            limit_per_clip: self.limit_per_clip,
        }];
        v.extend(self.extra_sources.iter().cloned());
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Checkpoints, logs and the resolved config are written here.
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub flow: FlowNetConfig,
    pub synthesis: SynthesisConfig,
    pub features: FeatureExtractorConfig,
    pub discriminator: DiscriminatorConfig,
    pub losses: LossWeights,
    pub roi: RoiProviderConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/default"),
            train: TrainConfig::default(),
            flow: FlowNetConfig::default(),
            synthesis: SynthesisConfig::default(),
            features: FeatureExtractorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            losses: LossWeights::default(),
            roi: RoiProviderConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.flow.validate()?;
        self.losses.validate()?;
        self.discriminator.validate()?;
        if self.train.crop > 0 {
            self.flow
                .check_input(self.train.crop, self.train.crop)
                .map_err(|_| {
                    Error::Config(format!(
                        "crop {} is not divisible by {}",
                        self.train.crop,
                        self.flow.divisor()
                    ))
                })?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_toml(path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Apply `key=value` overrides; see [`apply_overrides`].
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        apply_overrides(self, overrides)
    }
}

/// Apply `key=value` overrides to any serializable config. Values are parsed
/// as TOML, falling back to a plain string; the result is deserialized again
/// so unknown keys and bad values are rejected.
pub fn apply_overrides<T, S>(config: &T, overrides: &[S]) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
    S: AsRef<str>,
{
    let mut tree = toml::Table::try_from(config).map_err(|e| Error::Config(e.to_string()))?;
    for ov in overrides {
        let ov = ov.as_ref();
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let path = resolve_key(&tree, key)?;
        set_path(&mut tree, &path, parse_value(raw))?;
    }
    toml::Table::try_into(tree).map_err(|e| Error::Config(e.to_string()))
}

/// Load a TOML file into any config type.
pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn leaf_paths(table: &toml::Table, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    for (k, v) in table {
        prefix.push(k.clone());
        match v {
            toml::Value::Table(t) => leaf_paths(t, prefix, out),
            _ => out.push(prefix.clone()),
        }
        prefix.pop();
    }
}

fn resolve_key(tree: &toml::Table, key: &str) -> Result<Vec<String>> {
    if key.is_empty() {
        return Err(Error::Config("empty override key".into()));
    }
    if key.contains('.') {
        return Ok(key.split('.').map(str::to_string).collect());
    }
    let mut all = Vec::new();
    leaf_paths(tree, &mut Vec::new(), &mut all);
    let mut hits: Vec<Vec<String>> = all
        .into_iter()
        .filter(|p| p.last().is_some_and(|l| l == key))
        .collect();
    if hits.len() > 1 {
        if let Some(i) = hits.iter().position(|p| p.len() == 2 && p[0] == "train") {
            return Ok(hits.swap_remove(i));
        }
    }
    match hits.len() {
        1 => Ok(hits.into_iter().next().unwrap()),
        0 => Err(Error::Config(format!(
            "unknown key `{key}` (optional keys need a dotted path such as `section.{key}`)"
        ))),
        _ => Err(Error::Config(format!(
            "key `{key}` is ambiguous: {}",
            hits.iter()
                .map(|p| p.join("."))
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

fn set_path(tree: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut node = tree;
    for seg in parents {
        let entry = node
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(Error::Config(format!(
                    "`{}` is not a section",
                    path.join(".")
                )))
            }
        };
    }
    node.insert(last.clone(), value);
    Ok(())
}
