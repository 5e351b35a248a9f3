//! Run configuration: a TOML file with dotted keys, then the seed from
//! `--seed`/`DOMUS_SEED`, then `--set key=value` overrides, in that order.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use domus_core::downstream::{FinetuneConfig, FinetuneStrategy};
use domus_core::evaluation::{EvalProtocol, LodoConfig, Variant};
use domus_core::model::ModelConfig;
use domus_core::pretraining::PretrainConfig;
use serde::Deserialize;

use crate::exit::UsageError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub segmentation: SegmentationSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub protocol: ProtocolSection,
    pub paths: PathsSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub harmonics: usize,
    pub seconds_buckets: usize,
    pub context_enabled: bool,
    /// Must match the embedding table when one is given; without a table it
    /// defaults to `d`.
    pub d_text: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d: m.d,
            heads: m.heads,
            layers: m.layers,
            harmonics: m.harmonics,
            seconds_buckets: m.seconds_buckets,
            context_enabled: m.context_enabled,
            d_text: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationSection {
    pub window: usize,
    pub overlap: usize,
}

impl Default for SegmentationSection {
    fn default() -> Self {
        Self { window: 30, overlap: 29 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub p_event_select: f64,
    pub p_event_mask: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub windows_per_dataset: usize,
    pub lr: f64,
    pub symmetric: bool,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            p_event_select: p.p_event_select,
            p_event_mask: p.p_event_mask,
            temperature: p.temperature,
            batch_size: p.batch_size,
            epochs_phase1: p.epochs_phase1,
            epochs_phase2: p.epochs_phase2,
            windows_per_dataset: p.windows_per_dataset,
            lr: p.lr,
            symmetric: p.symmetric,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub strategy: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    /// Training percentage used by the `finetune` command.
    pub pct: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        Self {
            strategy: f.strategy.as_str().to_string(),
            epochs: f.epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            lambda: f.lambda,
            pct: 30.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub held_out: Option<String>,
    pub pcts: Vec<f64>,
    pub folds: usize,
    pub adl: bool,
    pub k: Vec<usize>,
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        let p = EvalProtocol::new("");
        Self {
            held_out: None,
            pcts: p.pcts,
            folds: p.folds,
            adl: p.adl,
            k: p.k_values,
            seeds: p.seeds,
            variants: p.variants.iter().map(|v| v.as_str().to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Canonical event CSV files; each file stem names its dataset.
    pub datasets: Vec<PathBuf>,
    pub embedding_table: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { datasets: Vec::new(), embedding_table: None, output_dir: PathBuf::from("out") }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies the seed variable and the overrides, and
    /// resolves relative paths against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let (mut table, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let table: toml::Table =
                    toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", p.display())))?;
                (table, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        if let Some(seed) = seed {
            let seed = i64::try_from(seed).map_err(|_| UsageError(format!("seed {seed} does not fit a TOML integer")))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| UsageError(format!("config: {e}")))?;
        config.paths.resolve(&base);
        config.validate()?;
        Ok(config)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d: m.d,
            heads: m.heads,
            layers: m.layers,
            harmonics: m.harmonics,
            seconds_buckets: m.seconds_buckets,
            context_enabled: m.context_enabled,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            p_event_select: p.p_event_select,
            p_event_mask: p.p_event_mask,
            temperature: p.temperature,
            batch_size: p.batch_size,
            epochs_phase1: p.epochs_phase1,
            epochs_phase2: p.epochs_phase2,
            windows_per_dataset: p.windows_per_dataset,
            lr: p.lr,
            symmetric: p.symmetric,
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self) -> Result<FinetuneConfig> {
        let f = &self.finetune;
        Ok(FinetuneConfig {
            strategy: FinetuneStrategy::parse(&f.strategy).map_err(|e| UsageError(e.to_string()))?,
            epochs: f.epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            lambda: f.lambda,
            seed: self.seed,
        })
    }

    pub fn lodo_config(&self) -> Result<LodoConfig> {
        Ok(LodoConfig {
            model: self.model_config(),
            window: self.segmentation.window,
            overlap: self.segmentation.overlap,
            pretrain: self.pretrain_config(),
            finetune: self.finetune_config()?,
            seed: self.seed,
        })
    }

    /// `held_out` from the command line wins over the config file.
    pub fn protocol(&self, held_out: Option<&str>) -> Result<EvalProtocol> {
        let p = &self.protocol;
        let Some(name) = held_out.or(p.held_out.as_deref()) else {
            bail!(UsageError("no held-out dataset: pass --held-out or set protocol.held_out".into()));
        };
        let variants =
            p.variants.iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>, _>>().map_err(|e| UsageError(e.to_string()))?;
        let protocol = EvalProtocol {
            held_out: name.to_string(),
            pcts: p.pcts.clone(),
            folds: p.folds,
            adl: p.adl,
            k_values: p.k.clone(),
            seeds: p.seeds.clone(),
            variants,
        };
        protocol.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(protocol)
    }

    fn validate(&self) -> Result<()> {
        let usage = |e: domus_core::error::CoreError| UsageError(e.to_string());
        self.model_config().validate().map_err(usage)?;
        self.pretrain_config().validate().map_err(usage)?;
        self.finetune_config()?;
        let s = &self.segmentation;
        if s.window == 0 || s.overlap >= s.window {
            bail!(UsageError(format!("segmentation needs 0 <= overlap < window, got window={} overlap={}", s.window, s.overlap)));
        }
        if !(self.finetune.pct > 0.0 && self.finetune.pct <= 100.0) {
            bail!(UsageError(format!("finetune.pct must lie in (0, 100], got {}", self.finetune.pct)));
        }
        if self.finetune.epochs == 0 || self.finetune.batch_size == 0 || !(self.finetune.lr > 0.0) {
            bail!(UsageError("finetune epochs, batch_size and lr must be positive".into()));
        }
        if self.model.d_text == Some(0) {
            bail!(UsageError("model.d_text must be positive".into()));
        }
        Ok(())
    }
}

impl PathsSection {
    fn resolve(&mut self, base: &Path) {
        for p in &mut self.datasets {
            *p = base.join(&*p);
        }
        if let Some(t) = &mut self.embedding_table {
            *t = base.join(&*t);
        }
        self.output_dir = base.join(&self.output_dir);
    }
}

/// `a.b.c=value`; the value is parsed as a TOML value and falls back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!(UsageError(format!("override {spec:?} is not key=value")));
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(UsageError(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!(UsageError(format!("override key {key:?}: {p} is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
