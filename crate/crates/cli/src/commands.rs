//! Command implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use domus_core::downstream::Head;
use domus_core::embedding::{AttributeEmbeddingTable, Lexicon};
use domus_core::evaluation::{evaluate_transfer, holdout_finetune, predictions_csv, pretrain_excluding};
use domus_core::ingestion::{generate_synthetic_corpus, parse_event_csv, preset, write_event_csv, Dataset, SyntheticHomeSpec, PRESET_NAMES};
use domus_core::model::Model;
use domus_core::pretraining::loss_history_csv;
use domus_nn::checkpoint;

use crate::config::RunConfig;
use crate::exit::UsageError;

/// Metadata key listing the datasets a checkpoint was pretrained on.
pub const PRETRAIN_DATASETS_KEY: &str = "pretrain.datasets";

pub const CHECKPOINT_FILE: &str = "pretrained.ckpt";
pub const PRETRAIN_LOSS_FILE: &str = "pretrain_loss.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const FINETUNE_METRICS_FILE: &str = "finetune_metrics.csv";
pub const FINETUNE_PREDICTIONS_FILE: &str = "finetune_predictions.csv";
pub const FINETUNE_LOSS_FILE: &str = "finetune_loss.csv";

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("writing {}", path.display()))?;
    tmp.write_all(bytes).with_context(|| format!("writing {}", path.display()))?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn synth(spec: Option<&Path>, preset_name: Option<&str>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = match (spec, preset_name) {
        (Some(p), None) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SyntheticHomeSpec::from_toml(&text).with_context(|| format!("spec {}", p.display()))?
        }
        (None, Some(name)) => preset(name).ok_or_else(|| {
            UsageError(format!("unknown preset {name:?}; available: {}", PRESET_NAMES.join(", ")))
        })?,
        _ => bail!(UsageError("pass exactly one of --spec and --preset".into())),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let dataset = generate_synthetic_corpus(&spec)?;
    write_atomic(out, &write_event_csv(&dataset))?;
    println!("{}: {} events, {} sensors -> {}", dataset.name, dataset.stream.len(), dataset.sensors.len(), out.display());
    Ok(())
}

pub fn embed_table_check(path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table = AttributeEmbeddingTable::from_tsv(&text).with_context(|| format!("table {}", path.display()))?;
    println!("{}: {} tokens, dim {}", path.display(), table.len(), table.dim());
    Ok(())
}

fn load_datasets(config: &RunConfig) -> Result<Vec<Dataset>> {
    if config.paths.datasets.is_empty() {
        bail!(UsageError("paths.datasets is empty".into()));
    }
    let mut out: Vec<Dataset> = Vec::new();
    for path in &config.paths.datasets {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| UsageError(format!("cannot name dataset {}", path.display())))?;
        let bytes = std::fs::read(path).with_context(|| format!("reading dataset {}", path.display()))?;
        let dataset = parse_event_csv(name, &bytes).with_context(|| format!("dataset {}", path.display()))?;
        if out.iter().any(|d| d.name == dataset.name) {
            bail!(UsageError(format!("two datasets are named {name}")));
        }
        out.push(dataset);
    }
    Ok(out)
}

fn lexicon(config: &RunConfig) -> Result<Lexicon> {
    let table = match &config.paths.embedding_table {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let table = AttributeEmbeddingTable::from_tsv(&text).with_context(|| format!("table {}", path.display()))?;
            if let Some(d) = config.model.d_text.filter(|&d| d != table.dim()) {
                bail!(UsageError(format!("model.d_text = {d} but {} has dim {}", path.display(), table.dim())));
            }
            table
        }
        None => AttributeEmbeddingTable::fallback(config.model.d_text.unwrap_or(config.model.d)),
    };
    Ok(Lexicon::new(table))
}

fn held_out_name(config: &RunConfig, flag: Option<&str>) -> Option<String> {
    flag.map(str::to_string).or_else(|| config.protocol.held_out.clone())
}

pub fn pretrain(config: &RunConfig, held_out: Option<&str>) -> Result<()> {
    let datasets = load_datasets(config)?;
    let held_out = held_out_name(config, held_out);
    if let Some(h) = &held_out {
        if !datasets.iter().any(|d| &d.name == h) {
            bail!(UsageError(format!("held-out dataset {h} is not among paths.datasets")));
        }
    }
    let mut lex = lexicon(config)?;
    let lodo = config.lodo_config()?;
    let (model, report) = pretrain_excluding(&datasets, held_out.as_deref().unwrap_or(""), &mut lex, &lodo)?;
    let mut meta = model.metadata();
    meta.insert(PRETRAIN_DATASETS_KEY.into(), report.datasets_seen.join(","));
    meta.insert("seed".into(), config.seed.to_string());
    let dir = &config.paths.output_dir;
    write_atomic(&dir.join(CHECKPOINT_FILE), &checkpoint::save(&model.store, &meta))?;
    write_atomic(&dir.join(PRETRAIN_LOSS_FILE), loss_history_csv(&report.history).as_bytes())?;
    let last = report.history.last().map_or(f32::NAN, |r| r.loss);
    println!(
        "pretrained on {} ({} steps, final loss {last:.4}) -> {}",
        report.datasets_seen.join(", "),
        report.history.len(),
        dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

/// Builds the model described by `config` and fills it from the checkpoint.
/// Refuses checkpoints that were pretrained on the held-out dataset.
fn load_pretrained(config: &RunConfig, checkpoint_path: &Path, held_out: &str, d_text: usize) -> Result<Model> {
    let bytes = std::fs::read(checkpoint_path).with_context(|| format!("reading {}", checkpoint_path.display()))?;
    let mut model = Model::new(config.model_config(), d_text, config.seed)?;
    let meta = checkpoint::load_into(&mut model.store, &bytes, true)
        .with_context(|| format!("checkpoint {} does not fit the configured model", checkpoint_path.display()))?;
    if let Some(seen) = meta.get(PRETRAIN_DATASETS_KEY) {
        if seen.split(',').any(|n| n == held_out) {
            bail!("checkpoint {} was pretrained on held-out dataset {held_out}", checkpoint_path.display());
        }
    }
    Ok(model)
}

fn held_out_dataset<'a>(datasets: &'a [Dataset], name: &str) -> Result<&'a Dataset> {
    datasets
        .iter()
        .find(|d| d.name == name)
        .ok_or_else(|| UsageError(format!("held-out dataset {name} is not among paths.datasets")).into())
}

pub fn eval(config: &RunConfig, checkpoint_path: &Path, held_out: Option<&str>) -> Result<()> {
    let protocol = config.protocol(held_out)?;
    let datasets = load_datasets(config)?;
    let target = held_out_dataset(&datasets, &protocol.held_out)?;
    let mut lex = lexicon(config)?;
    let model = load_pretrained(config, checkpoint_path, &protocol.held_out, lex.dim())?;
    let outcome = evaluate_transfer(&model, target, &mut lex, &protocol, &config.lodo_config()?)?;
    let dir = &config.paths.output_dir;
    write_atomic(&dir.join(METRICS_FILE), outcome.report.to_csv().as_bytes())?;
    write_atomic(&dir.join(PREDICTIONS_FILE), &predictions_csv(&outcome.predictions)?)?;
    print!("{}", outcome.report.summary_table());
    Ok(())
}

pub fn finetune(config: &RunConfig, checkpoint_path: &Path, held_out: Option<&str>) -> Result<()> {
    let protocol = config.protocol(held_out)?;
    let datasets = load_datasets(config)?;
    let target = held_out_dataset(&datasets, &protocol.held_out)?;
    let mut lex = lexicon(config)?;
    let model = load_pretrained(config, checkpoint_path, &protocol.held_out, lex.dim())?;
    let lodo = config.lodo_config()?;
    let (tuned, outcome) = holdout_finetune(&model, target, &mut lex, &protocol, config.finetune.pct, &lodo)?;
    let dir = &config.paths.output_dir;
    let mut losses = String::from("task,epoch,loss\n");
    for t in &tuned {
        let task = t.task.name();
        for (e, l) in t.losses.iter().enumerate() {
            writeln!(losses, "{task},{e},{l}").expect("string write");
        }
        let mut meta: BTreeMap<String, String> = t.model.metadata();
        meta.insert("finetune.task".into(), task.clone());
        meta.insert("finetune.held_out".into(), protocol.held_out.clone());
        meta.insert("finetune.strategy".into(), config.finetune.strategy.clone());
        meta.insert("finetune.pct".into(), config.finetune.pct.to_string());
        meta.insert("seed".into(), config.seed.to_string());
        match &t.head {
            Head::Adl(h) => {
                meta.insert("head.classes".into(), h.classes.join(","));
            }
            Head::NextK(h) => {
                meta.insert("head.k".into(), h.k.to_string());
                let vocab: Vec<String> = h.vocab.iter().map(|(s, st)| format!("{s}:{}", st.as_str())).collect();
                meta.insert("head.vocab".into(), vocab.join(","));
            }
        }
        write_atomic(&dir.join(format!("finetuned_{task}.ckpt")), &checkpoint::save(&t.model.store, &meta))?;
    }
    write_atomic(&dir.join(FINETUNE_LOSS_FILE), losses.as_bytes())?;
    write_atomic(&dir.join(FINETUNE_METRICS_FILE), outcome.report.to_csv().as_bytes())?;
    write_atomic(&dir.join(FINETUNE_PREDICTIONS_FILE), &predictions_csv(&outcome.predictions)?)?;
    print!("{}", outcome.report.summary_table());
    Ok(())
}
