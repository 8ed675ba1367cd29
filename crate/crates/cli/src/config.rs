//! Run configuration: a TOML file with one section per command, dotted
//! `key=value` overrides, and a resolved snapshot written next to outputs.
//!
//! Resolution order: built-in defaults, then every component seed derived
//! from the top-level `seed`, then the file, then the overrides. Keys that
//! do not exist in the defaults are rejected, so a typo fails loudly.

use std::path::{Path, PathBuf};

use moddpo::corrupt::CorruptionSpec;
use moddpo::experiment::{ExperimentConfig, ReferenceCorpus};
use moddpo::synth::{DatasetConfig, EvalSetConfig, NaturalCorpusConfig, WorldConfig};
use moddpo::train::{TrainConfig, WarmupConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Every artifact is read from and written to this directory.
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub world: WorldConfig,
    pub dataset: DatasetConfig,
    pub natural: NaturalCorpusConfig,
    pub eval_set: EvalSetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// Artifact stem; empty means the loss variant's name.
    pub name: String,
    pub reference_corpus: ReferenceCorpus,
    pub warmup: WarmupConfig,
    #[serde(flatten)]
    pub config: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            name: String::new(),
            reference_corpus: ReferenceCorpus::default(),
            warmup: WarmupConfig::default(),
            config: TrainConfig::desk_scale(),
        }
    }
}

impl TrainSection {
    pub fn stem(&self) -> String {
        if self.name.is_empty() {
            self.config.loss_variant.as_str().to_string()
        } else {
            self.name.clone()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Checkpoint stems to compare; empty means every `*.ckpt` in `out_dir`.
    pub models: Vec<String>,
    pub shift_corruption: CorruptionSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifySection {
    pub seed: u64,
    /// Also run the seed-averaged training experiments.
    pub experiments: bool,
    pub experiment_seeds: Vec<u64>,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            seed: 0,
            experiments: false,
            experiment_seeds: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub verify: VerifySection,
}

impl RunConfig {
    /// Defaults with every component seed derived from `seed`.
    pub fn seeded_defaults(seed: u64) -> Self {
        let mut c = Self {
            seed,
            ..Self::default()
        };
        c.apply_experiment(&c.experiment().reseeded(seed));
        c
    }

    /// The end-to-end experiment this configuration describes.
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            world: self.synth.world,
            dataset: self.synth.dataset,
            natural: self.synth.natural,
            eval: self.synth.eval_set,
            warmup: self.train.warmup,
            reference_corpus: self.train.reference_corpus,
            train: self.train.config,
            shift_corruption: self.eval.shift_corruption,
        }
    }

    fn apply_experiment(&mut self, e: &ExperimentConfig) {
        self.synth.world = e.world;
        self.synth.dataset = e.dataset;
        self.synth.natural = e.natural;
        self.synth.eval_set = e.eval;
        self.train.warmup = e.warmup;
        self.train.reference_corpus = e.reference_corpus;
        self.train.config = e.train;
        self.eval.shift_corruption = e.shift_corruption;
    }

    pub fn out_dir(&self) -> &Path {
        &self.paths.out_dir
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

/// Splits `a.b.c=value`; the value is read as a TOML literal and falls back
/// to a bare string, so `train.loss_variant=dpo` needs no quotes.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{text}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Config(format!("override key `{key}` has an empty segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("override path is non-empty");
    let mut node = table;
    for seg in parents {
        let entry = node
            .entry(seg.clone())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{}` is not a section", path.join("."))))?;
    }
    node.insert(last.clone(), value);
    Ok(())
}

/// Every key of `user` must exist in `defaults`; tables recurse.
fn check_known(user: &Table, defaults: &Table, prefix: &str) -> Result<(), CliError> {
    for (k, v) in user {
        let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, defaults.get(k)) {
            (_, None) => return Err(CliError::Config(format!("unknown config key `{name}`"))),
            (Value::Table(u), Some(Value::Table(d))) => check_known(u, d, &name)?,
            _ => {}
        }
    }
    Ok(())
}

fn merge(base: &mut Table, user: Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Reads `file` (if any), applies `overrides`, and resolves the result.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut user = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str::<Table>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    for text in overrides {
        let (path, value) = parse_override(text)?;
        set_path(&mut user, &path, value)?;
    }
    let seed = match user.get("seed") {
        None => 0,
        Some(Value::Integer(s)) if *s >= 0 => *s as u64,
        Some(other) => return Err(CliError::Config(format!("seed must be a non-negative integer, got {other}"))),
    };
    let mut resolved = Table::try_from(RunConfig::seeded_defaults(seed)).expect("defaults serialize");
    check_known(&user, &resolved, "")?;
    merge(&mut resolved, user);
    let cfg: RunConfig = resolved
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
    cfg.train.config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}
