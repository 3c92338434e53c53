//! Experiment configuration files (TOML).
//!
//! Every section and key is optional; missing ones take the documented
//! defaults and are logged. Unknown keys are errors naming the key.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentParams, DaKind};
use crate::data::{gen_glyphs, load_idx, Dataset};
use crate::error::{Error, Result};
use crate::losses::Ablation;
use crate::model::BlockSpec;
use crate::optim::SgdConfig;
use crate::rng::child_seed;
use crate::trainer::{BetaConfig, Method, Seeds, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub name: String,
    /// Run directory; relative paths resolve against the config file.
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            name: "experiment".into(),
            out_dir: PathBuf::from("runs/experiment"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Glyphs,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Glyphs,
            classes: 10,
            train_size: 10_000,
            test_size: 2_000,
            size: 16,
            noise: 0.4,
            seed: 7,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    TinyCnn,
    TinyMlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: Arch,
    /// Hidden width of the MLP.
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: Arch::TinyCnn,
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub method: Method,
    pub da_set: Vec<DaKind>,
    pub split_index: i64,
    pub epochs: usize,
    pub batch_size: usize,
    pub fair_budget: bool,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            method: Method::Ours,
            da_set: DaKind::DEFAULT_SET.to_vec(),
            split_index: 1,
            epochs: 30,
            batch_size: 128,
            fair_budget: true,
            eval_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    /// Selection runs R.
    pub runs: usize,
    pub split_fraction: f64,
    /// Split each class separately instead of the whole set.
    pub stratified: bool,
    pub seed: u64,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection {
            runs: 3,
            split_fraction: 0.8,
            stratified: false,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub optim: SgdConfig,
    pub beta: BetaConfig,
    pub seeds: Seeds,
    pub ablation: Ablation,
    pub augment: AugmentParams,
    pub protocol: ProtocolSection,
}

impl ExperimentConfig {
    /// Parses TOML text. Relative paths are resolved against `base_dir`.
    ///
    /// Returns the config and the dotted keys that took default values.
    pub fn parse(text: &str, base_dir: &Path) -> Result<(Self, Vec<String>)> {
        let raw: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<syntax>", e.message().to_string()))?;
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<syntax>", e.message().to_string()))?;
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(key, e.inner().message().to_string())
        })?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.run.out_dir);
        for p in [
            &mut cfg.data.train_images,
            &mut cfg.data.train_labels,
            &mut cfg.data.test_images,
            &mut cfg.data.test_labels,
        ]
        .into_iter()
        .flatten()
        {
            resolve(p);
        }
        cfg.validate()?;
        let full = toml::Table::try_from(&cfg).map_err(|e| Error::config("<internal>", e.to_string()))?;
        let mut defaulted = Vec::new();
        missing_keys(&full, &raw, "", &mut defaulted);
        Ok((cfg, defaulted))
    }

    /// Reads and parses `path`, logging every defaulted key.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let (cfg, defaulted) = Self::parse(&text, base)?;
        let full = toml::Table::try_from(&cfg).map_err(|e| Error::config("<internal>", e.to_string()))?;
        for key in &defaulted {
            log::info!("config default {key} = {}", lookup(&full, key).map_or("?".into(), |v| v.to_string()));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match d.source {
            DataSource::Glyphs => {
                if d.classes == 0 || d.classes > crate::data::GLYPH_NAMES.len() {
                    return Err(Error::config(
                        "data.classes",
                        format!("must be in 1..={}", crate::data::GLYPH_NAMES.len()),
                    ));
                }
                if d.size < 8 {
                    return Err(Error::config("data.size", "must be at least 8"));
                }
                if d.train_size == 0 || d.test_size == 0 {
                    return Err(Error::config("data.train_size", "train and test sizes must be positive"));
                }
                if !(d.noise >= 0.0) {
                    return Err(Error::config("data.noise", "must be non-negative"));
                }
            }
            DataSource::Idx => {
                for (key, path) in [
                    ("data.train_images", &d.train_images),
                    ("data.train_labels", &d.train_labels),
                    ("data.test_images", &d.test_images),
                    ("data.test_labels", &d.test_labels),
                ] {
                    match path {
                        None => return Err(Error::config(key, "required when data.source = \"idx\"")),
                        Some(p) if !p.exists() => {
                            return Err(Error::config(key, format!("{} does not exist", p.display())));
                        }
                        Some(_) => {}
                    }
                }
            }
        }
        let p = &self.protocol;
        if !(p.split_fraction > 0.0 && p.split_fraction < 1.0) {
            return Err(Error::config("protocol.split_fraction", "must lie strictly between 0 and 1"));
        }
        if p.runs == 0 {
            return Err(Error::config("protocol.runs", "must be at least 1"));
        }
        if self.model.hidden == 0 {
            return Err(Error::config("model.hidden", "must be positive"));
        }
        if self.optim.base_lr < 0.0 {
            return Err(Error::config("optim.base_lr", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return Err(Error::config("optim.momentum", "must be in [0, 1)"));
        }
        if self.optim.weight_decay < 0.0 {
            return Err(Error::config("optim.weight_decay", "must be non-negative"));
        }
        if self.train.split_index < -1 {
            return Err(Error::config("train.split_index", "must be at least -1"));
        }
        self.train_config_for([1, 8, 8], 1).validate()
    }

    /// Training and test sets described by the `[data]` section.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        match d.source {
            DataSource::Glyphs => Ok((
                gen_glyphs(d.classes, d.train_size, d.size, d.noise, d.seed)?,
                gen_glyphs(d.classes, d.test_size, d.size, d.noise, child_seed(d.seed, "test", 0))?,
            )),
            DataSource::Idx => {
                let path = |p: &Option<PathBuf>| p.clone().expect("validated");
                let train = load_idx(&path(&d.train_images), &path(&d.train_labels))?;
                let test = crate::data::load_idx_with_classes(
                    &path(&d.test_images),
                    &path(&d.test_labels),
                    Some(train.num_classes()),
                )?;
                Ok((train, test))
            }
        }
    }

    pub fn model_spec(&self, input: [usize; 3], num_classes: usize) -> BlockSpec {
        match self.model.arch {
            Arch::TinyCnn => BlockSpec::tiny_cnn(input, num_classes),
            Arch::TinyMlp => BlockSpec::tiny_mlp(input, num_classes, self.model.hidden),
        }
    }

    /// The training configuration for data of the given shape.
    pub fn train_config_for(&self, input: [usize; 3], num_classes: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            method: t.method,
            da_set: t.da_set.clone(),
            split_index: t.split_index,
            epochs: t.epochs,
            batch_size: t.batch_size,
            optim: self.optim,
            beta: self.beta,
            seeds: self.seeds,
            fair_budget: t.fair_budget,
            model: self.model_spec(input, num_classes),
            ablation: self.ablation,
            augment: self.augment.clone(),
            eval_every: t.eval_every,
        }
    }

    pub fn train_config(&self, data: &Dataset) -> TrainConfig {
        self.train_config_for(data.image_shape(), data.num_classes())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<internal>", e.to_string()))
    }
}

fn missing_keys(full: &toml::Table, raw: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in full {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match (value, raw.get(key)) {
            (toml::Value::Table(sub), Some(toml::Value::Table(raw_sub))) => missing_keys(sub, raw_sub, &path, out),
            (toml::Value::Table(sub), None) => missing_keys(sub, &toml::Table::new(), &path, out),
            (_, None) => out.push(path),
            _ => {}
        }
    }
}

fn lookup<'a>(table: &'a toml::Table, dotted: &str) -> Option<&'a toml::Value> {
    let mut parts = dotted.split('.');
    let mut value = table.get(parts.next()?)?;
    for part in parts {
        value = value.as_table()?.get(part)?;
    }
    Some(value)
}
