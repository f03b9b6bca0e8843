//! Attack configuration: a TOML file plus `MEMAUDIT_*` environment overrides.
//!
//! ```toml
//! output_dir = "runs/demo"
//! master_seed = 7
//! workers = 0                 # 0 = one per core
//! num_samples = 20000         # per strategy
//! strategies = ["top_n", "decayed_temperature", "prefix_conditioned"]
//! metrics = ["perplexity", "small", "medium", "zlib", "lowercase", "window"]
//!
//! [models.target]
//! path = "models/order9.bin"
//! [models.small]
//! path = "models/order3.bin"
//! [models.medium]
//! base_url = "http://127.0.0.1:8000"
//! model_id = "gpt2-medium"
//!
//! [sampler]                   # all optional
//! n = 40
//! max_tokens = 256
//!
//! [pool]                      # required for prefix_conditioned
//! path = "seed_text.txt"
//! min_words = 5
//!
//! [selection]
//! pool_size = 1000
//! pick = 100
//!
//! [verify]                    # optional auto-labeling against a known corpus
//! corpus = "corpus.jsonl"
//! ```
//!
//! `MEMAUDIT_SELECTION__PICK=50` sets `selection.pick`; a double underscore
//! separates nesting levels. Values are parsed as TOML and fall back to
//! plain strings. Relative paths resolve against the config file directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::{SamplerConfig, Strategy};
use crate::ground_truth::DEFAULT_PROXIMITY_FACTOR;
use crate::lm::ModelHandle;
use crate::metrics::MetricKind;
use crate::pipeline::select::SelectionPlan;
use crate::reference::NgramModel;
use crate::remote::{RemoteEndpoint, RemoteModel};

pub const ENV_PREFIX: &str = "MEMAUDIT_";
pub const DESK_SCALE_SAMPLES: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileModel {
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    File(FileModel),
    Remote(RemoteEndpoint),
}

impl ModelRef {
    pub fn load(&self) -> Result<ModelHandle> {
        Ok(match self {
            ModelRef::File(f) => Arc::new(NgramModel::load(&f.path)?),
            ModelRef::Remote(ep) => Arc::new(RemoteModel::new(ep.clone())?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub target: ModelRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub small: Option<ModelRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub medium: Option<ModelRef>,
}

/// Sampler settings shared by every strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub n: usize,
    pub max_tokens: usize,
    pub temp_start: f64,
    pub temp_end: f64,
    pub decay_tokens: usize,
    pub context_min_tokens: usize,
    pub context_max_tokens: usize,
    pub temperature_before_truncation: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        SamplerSection {
            n: d.n,
            max_tokens: d.max_tokens,
            temp_start: d.temp_start,
            temp_end: d.temp_end,
            decay_tokens: d.decay_tokens,
            context_min_tokens: d.context_min_tokens,
            context_max_tokens: d.context_max_tokens,
            temperature_before_truncation: d.temperature_before_truncation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub path: PathBuf,
    #[serde(default = "default_min_words")]
    pub min_words: usize,
}

fn default_min_words() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub corpus: PathBuf,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default = "default_proximity")]
    pub proximity_factor: f64,
}

fn default_proximity() -> f64 {
    DEFAULT_PROXIMITY_FACTOR
}

fn default_samples() -> usize {
    DESK_SCALE_SAMPLES
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn default_metrics() -> Vec<MetricKind> {
    MetricKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub master_seed: u64,
    /// Worker threads; 0 uses one per core. Does not affect outputs.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_samples")]
    pub num_samples: usize,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricKind>,
    pub models: ModelsConfig,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolConfig>,
    #[serde(default)]
    pub selection: SelectionPlan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
}

const TOP_LEVEL_KEYS: &[&str] = &[
    "output_dir",
    "master_seed",
    "workers",
    "num_samples",
    "strategies",
    "metrics",
    "models",
    "sampler",
    "pool",
    "selection",
    "verify",
];

fn parse_override(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `MEMAUDIT_A__B=value` style overrides. Keys whose first segment
/// is not a config field are ignored so unrelated variables sharing the
/// prefix do not break loading.
pub fn apply_overrides<I, K, V>(root: &mut toml::Table, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.as_ref().strip_prefix(ENV_PREFIX)?;
            Some((rest.to_ascii_lowercase(), v.as_ref().to_string()))
        })
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<&str> = key.split("__").collect();
        if !TOP_LEVEL_KEYS.contains(&path[0]) || path.iter().any(|p| p.is_empty()) {
            continue;
        }
        let mut table = &mut *root;
        for seg in &path[..path.len() - 1] {
            let entry = table
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{ENV_PREFIX}{key}: {seg} is not a table")))?;
        }
        table.insert(path[path.len() - 1].to_string(), parse_override(&raw));
    }
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl AttackConfig {
    pub fn from_toml_str<I, K, V>(text: &str, env: I, base_dir: &Path) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        apply_overrides(&mut table, env)?;
        let mut cfg: AttackConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file and applies overrides from the process environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, std::env::vars(), base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        for m in [Some(&mut self.models.target), self.models.small.as_mut(), self.models.medium.as_mut()]
            .into_iter()
            .flatten()
        {
            if let ModelRef::File(f) = m {
                resolve(base, &mut f.path);
            }
        }
        if let Some(p) = &mut self.pool {
            resolve(base, &mut p.path);
        }
        if let Some(v) = &mut self.verify {
            resolve(base, &mut v.corpus);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.metrics.is_empty() {
            return Err(Error::Config("at least one strategy and one metric are required".into()));
        }
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be >= 1".into()));
        }
        if self.strategies.contains(&Strategy::PrefixConditioned) && self.pool.is_none() {
            return Err(Error::Config("prefix_conditioned needs a [pool] section".into()));
        }
        if self.metrics.contains(&MetricKind::SmallRatio) && self.models.small.is_none() {
            return Err(Error::Config("metric small needs models.small".into()));
        }
        if self.metrics.contains(&MetricKind::MediumRatio) && self.models.medium.is_none() {
            return Err(Error::Config("metric medium needs models.medium".into()));
        }
        if self.selection.pick == 0 || self.selection.pick > self.selection.pool_size {
            return Err(Error::Config("selection needs 1 <= pick <= pool_size".into()));
        }
        for s in &self.strategies {
            self.sampler_for(*s).validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Sampler settings for one strategy. Sample ids are disjoint across
    /// strategies (see [`AttackConfig::first_sample_id`]).
    pub fn sampler_for(&self, strategy: Strategy) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            strategy,
            n: s.n,
            max_tokens: s.max_tokens,
            temp_start: s.temp_start,
            temp_end: s.temp_end,
            decay_tokens: s.decay_tokens,
            context_min_tokens: s.context_min_tokens,
            context_max_tokens: s.context_max_tokens,
            master_seed: self.master_seed,
            num_samples: self.num_samples,
            temperature_before_truncation: s.temperature_before_truncation,
        }
    }

    /// Ids are keyed to the strategy's fixed position, not to the order in
    /// the config, so dropping a strategy does not change the others.
    pub fn first_sample_id(&self, strategy: Strategy) -> u64 {
        let pos = Strategy::ALL.iter().position(|s| *s == strategy).expect("known strategy");
        pos as u64 * self.num_samples as u64
    }

    /// Hash over every value that influences outputs; `workers` and
    /// `output_dir` are excluded.
    pub fn content_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.workers = 0;
        c.output_dir = PathBuf::new();
        Ok(crate::pipeline::io::sha256_hex(&serde_json::to_vec(&c)?))
    }
}
