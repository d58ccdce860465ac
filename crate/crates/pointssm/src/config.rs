//! Run configuration: TOML sections `model`, `data`, `train` and `bench`,
//! layered as profile defaults, then the file, then `--set` overrides.

use std::fs;
use std::path::Path;

use pointssm_core::data::SyntheticConfig;
use pointssm_core::model::ModelConfig;
use pointssm_core::ssm::BlockKind;
use pointssm_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

/// Environment variable consulted when no seed is given explicitly.
pub const SEED_ENV: &str = "POINTSSM_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub blocks: Vec<BlockKind>,
    pub repeat: usize,
    pub d_model: usize,
    pub d_state: usize,
    /// Rows whose estimated working set exceeds this are reported as
    /// out of memory without running.
    pub max_bytes: u64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![1024, 2048, 4096, 8192],
            blocks: vec![BlockKind::SelectiveSsm, BlockKind::MaskedAttention],
            repeat: 5,
            d_model: 16,
            d_state: 16,
            max_bytes: 2 << 30,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            errs.push("bench.lengths must be non-empty and positive".to_string());
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            errs.push("bench.lengths must be strictly ascending".to_string());
        }
        if let Some(k) = self
            .blocks
            .iter()
            .find(|k| !matches!(k, BlockKind::SelectiveSsm | BlockKind::MaskedAttention))
        {
            errs.push(format!("bench.blocks: `{k}` has no inference kernel"));
        }
        if self.blocks.is_empty() {
            errs.push("bench.blocks must be non-empty".to_string());
        }
        if self.repeat == 0 {
            errs.push("bench.repeat must be positive".to_string());
        }
        if self.d_model == 0 || self.d_state == 0 {
            errs.push("bench.d_model and bench.d_state must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Everything a subcommand reads from configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SyntheticConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

/// Which training defaults apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Pretrain,
    Classify,
}

impl RunConfig {
    /// Desk-scale defaults.
    pub fn desk(profile: Profile) -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            data: SyntheticConfig::default(),
            train: match profile {
                Profile::Pretrain => TrainConfig::pretrain_desk(),
                Profile::Classify => TrainConfig::classify_desk(),
            },
            bench: BenchConfig::default(),
        }
    }

    /// Every problem in the configuration, not just the first.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        let tag = |s: &'static str, e: Vec<String>| e.into_iter().map(move |m| format!("{s}: {m}"));
        if let Err(e) = self.model.validate() {
            errs.extend(tag("model", e));
        }
        if let Err(e) = self.train.validate() {
            errs.extend(tag("train", e));
        }
        if let Err(e) = self.bench.validate() {
            errs.extend(e);
        }
        if self.data.points < self.model.num_points {
            errs.push(format!(
                "data.points ({}) is below model.num_points ({})",
                self.data.points, self.model.num_points
            ));
        }
        if !(0.0..1.0).contains(&self.data.stretch) {
            errs.push("data.stretch must lie in [0, 1)".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    /// SHA-256 of the effective TOML text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `section.key=value`; the value is read as TOML, falling back to
/// a bare string.
pub fn parse_override(s: &str) -> CliResult<(String, String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override `{s}` is not KEY=VALUE")))?;
    let (section, field) = key
        .trim()
        .split_once('.')
        .ok_or_else(|| CliError::usage(format!("override key `{key}` must be section.key")))?;
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((section.to_string(), field.to_string(), value))
}

/// Layers file and overrides onto the profile defaults.
#[derive(Debug)]
pub struct ConfigBuilder {
    table: Table,
    explicit_seed: bool,
}

impl ConfigBuilder {
    pub fn new(profile: Profile) -> Self {
        let table = Table::try_from(RunConfig::desk(profile)).expect("defaults serialize");
        ConfigBuilder {
            table,
            explicit_seed: false,
        }
    }

    fn note_seed(&mut self, t: &Table) {
        if t.get("train")
            .and_then(Value::as_table)
            .is_some_and(|s| s.contains_key("seed"))
        {
            self.explicit_seed = true;
        }
    }

    pub fn file(mut self, path: Option<&Path>) -> CliResult<Self> {
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            let t: Table = toml::from_str(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            self.note_seed(&t);
            merge(&mut self.table, t);
        }
        Ok(self)
    }

    pub fn set(mut self, section: &str, key: &str, value: Value) -> Self {
        let mut inner = Table::new();
        inner.insert(key.to_string(), value);
        let mut t = Table::new();
        t.insert(section.to_string(), Value::Table(inner));
        self.note_seed(&t);
        merge(&mut self.table, t);
        self
    }

    pub fn overrides(mut self, sets: &[String]) -> CliResult<Self> {
        for s in sets {
            let (section, key, value) = parse_override(s)?;
            self = self.set(&section, &key, value);
        }
        Ok(self)
    }

    /// Falls back to `POINTSSM_SEED` when neither file nor flags set
    /// `train.seed`; resolves, then validates exhaustively.
    pub fn build(mut self) -> CliResult<RunConfig> {
        if !self.explicit_seed {
            if let Some(seed) = env_seed()? {
                self = self.set("train", "seed", Value::Integer(seed));
            }
        }
        let cfg: RunConfig = self
            .table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::usage(format!("config: {e}")))?;
        cfg.validate().map_err(|errs| {
            CliError::usage(format!("invalid configuration:\n  {}", errs.join("\n  ")))
        })?;
        Ok(cfg)
    }
}

/// `POINTSSM_SEED`, if set. Limited to `i64::MAX` so it fits a TOML integer.
pub fn env_seed() -> CliResult<Option<i64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse::<i64>()
            .ok()
            .filter(|&v| v >= 0)
            .map(Some)
            .ok_or_else(|| {
                CliError::usage(format!("{SEED_ENV}=`{s}` is not a non-negative integer"))
            }),
        Err(_) => Ok(None),
    }
}
