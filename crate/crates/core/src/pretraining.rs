//! Dual contrastive pretraining.
//!
//! Phase 1 trains the event encoder: each window is paired with a copy in
//! which some events have one attribute slot masked, and the mean of the raw
//! event embeddings is the sequence embedding. Phase 2 freezes the event
//! encoder and trains the context encoder on pairs in which whole events are
//! masked, using the mean of the contextualized embeddings. Both phases use
//! InfoNCE with in-batch negatives.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use domus_nn::{adam_step, AdamConfig, AdamState, Graph, NodeId, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::context_encoder::pool_sequence;
use crate::embedding::Lexicon;
use crate::error::{config_err, data_err, CoreError, Result};
use crate::event_encoder::{EventCode, Slot, SlotMask, NUM_SLOTS};
use crate::ingestion::build_sampling_plan;
use crate::model::{Model, WindowBatch, CONTEXT_GROUP, EVENT_GROUP};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    /// Probability that an event gets one attribute masked (phase 1).
    pub p_event_select: f64,
    /// Probability that an event is masked entirely (phase 2).
    pub p_event_mask: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    /// Window draws per dataset per epoch.
    pub windows_per_dataset: usize,
    pub lr: f64,
    /// Average both InfoNCE directions.
    pub symmetric: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            p_event_select: 0.3,
            p_event_mask: 0.15,
            temperature: 0.1,
            batch_size: 64,
            epochs_phase1: 3,
            epochs_phase2: 3,
            windows_per_dataset: 256,
            lr: 1e-3,
            symmetric: true,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_event_select", self.p_event_select), ("p_event_mask", self.p_event_mask)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err(format!("{name}={p} outside [0, 1]")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(config_err(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.batch_size < 2 {
            return Err(config_err("batch_size must be at least 2"));
        }
        if self.windows_per_dataset == 0 || !(self.lr > 0.0) {
            return Err(config_err("windows_per_dataset and lr must be positive"));
        }
        Ok(())
    }
}

/// Masks of the augmented copy of a window; the original is unmasked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedPair {
    pub masks: Vec<SlotMask>,
}

impl AugmentedPair {
    pub fn original(&self) -> Vec<SlotMask> {
        vec![SlotMask::NONE; self.masks.len()]
    }
}

/// Each event is selected with probability `p`; a selected event has one
/// slot, chosen uniformly among the seven, masked.
pub fn augment_mask_attribute<R: Rng>(len: usize, p: f64, rng: &mut R) -> AugmentedPair {
    let masks = (0..len)
        .map(|_| {
            if rng.gen_bool(p) {
                SlotMask::single(Slot::ALL[rng.gen_range(0..NUM_SLOTS)])
            } else {
                SlotMask::NONE
            }
        })
        .collect();
    AugmentedPair { masks }
}

/// Each event is masked entirely with probability `p`.
pub fn augment_mask_event<R: Rng>(len: usize, p: f64, rng: &mut R) -> AugmentedPair {
    let masks = (0..len).map(|_| if rng.gen_bool(p) { SlotMask::ALL } else { SlotMask::NONE }).collect();
    AugmentedPair { masks }
}

/// InfoNCE over cosine similarities scaled by `1/τ`; row `i` of `positives`
/// is the positive of anchor `i`, the other rows are its negatives.
pub fn infonce<T: Real>(
    g: &mut Graph<T>,
    anchors: NodeId,
    positives: NodeId,
    temperature: f64,
    symmetric: bool,
) -> Result<NodeId> {
    let b = g.value(anchors).rows();
    if b < 2 {
        return Err(data_err("InfoNCE needs a batch of at least 2"));
    }
    if g.value(positives).shape() != g.value(anchors).shape() {
        return Err(data_err("anchors and positives differ in shape"));
    }
    let mut eye = Tensor::zeros(&[b, b]);
    for i in 0..b {
        eye.data_mut()[i * b + i] = T::one();
    }
    let a = g.l2_normalize_rows(anchors);
    let p = g.l2_normalize_rows(positives);
    let inv_t = T::lit(1.0 / temperature);
    let sim = g.matmul_bt(a, p)?;
    let sim = g.scale(sim, inv_t);
    let forward = g.softmax_cross_entropy(sim, &eye)?;
    if !symmetric {
        return Ok(forward);
    }
    let sim_t = g.matmul_bt(p, a)?;
    let sim_t = g.scale(sim_t, inv_t);
    let backward = g.softmax_cross_entropy(sim_t, &eye)?;
    let both = g.add(forward, backward)?;
    Ok(g.scale(both, T::lit(0.5)))
}

/// Event codes of one dataset and the start indices of its windows.
#[derive(Clone, Debug)]
pub struct DatasetWindows {
    /// Source dataset name; tags every window drawn from it.
    pub name: String,
    pub codes: Vec<EventCode>,
    pub starts: Vec<usize>,
    pub window: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub phase: u8,
    pub epoch: usize,
    pub step: usize,
    pub loss: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub history: Vec<LossRecord>,
    /// Names of the datasets whose windows entered a batch, sorted.
    pub datasets_seen: Vec<String>,
}

/// `phase,epoch,step,loss`
pub fn loss_history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("phase,epoch,step,loss\n");
    for r in history {
        writeln!(out, "{},{},{},{}", r.phase, r.epoch, r.step, r.loss).expect("string write");
    }
    out
}

fn check_loss(loss: f32, phase: u8, epoch: usize, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(CoreError::NonFinite(format!("pretraining loss {loss} at phase {phase}, epoch {epoch}, step {step}")));
    }
    Ok(())
}

/// Runs both phases in place. On return the event encoder group is frozen.
pub fn pretrain(
    model: &mut Model,
    lexicon: &Lexicon,
    datasets: &[DatasetWindows],
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    config.validate()?;
    let counts: Vec<usize> = datasets.iter().map(|d| d.starts.len()).collect();
    let plan = build_sampling_plan(&counts, config.windows_per_dataset, config.seed)?;
    let mut history = Vec::new();
    let mut seen = BTreeSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let adam = AdamConfig { lr: config.lr, ..AdamConfig::default() };

    model.store.set_frozen(EVENT_GROUP, false)?;
    model.store.set_frozen(CONTEXT_GROUP, true)?;
    let mut state = AdamState::new(adam);
    for epoch in 0..config.epochs_phase1 {
        let draws = plan.epoch(epoch as u64);
        for (step, chunk) in draws.chunks(config.batch_size).filter(|c| c.len() >= 2).enumerate() {
            let mut batch = WindowBatch::default();
            let mut augmented = Vec::with_capacity(chunk.len());
            for d in chunk {
                let ds = &datasets[d.dataset];
                seen.insert(ds.name.clone());
                let start = ds.starts[d.window];
                let codes = &ds.codes[start..start + ds.window];
                batch.push_window(d.dataset, start, codes, &vec![SlotMask::NONE; ds.window])?;
                augmented.push(augment_mask_attribute(ds.window, config.p_event_select, &mut rng));
            }
            for (d, aug) in chunk.iter().zip(&augmented) {
                let ds = &datasets[d.dataset];
                let start = ds.starts[d.window];
                batch.push_window(d.dataset, start, &ds.codes[start..start + ds.window], &aug.masks)?;
            }
            let mut g = Graph::new();
            let rows = model.event_rows(&mut g, &model.store, lexicon, &batch)?;
            let pooled = pool_sequence(&mut g, rows, &batch.groups)?;
            let loss = pair_loss(&mut g, pooled, chunk.len(), config)?;
            let value = g.value(loss).item();
            check_loss(value, 1, epoch, step)?;
            let grads = g.backward(loss)?;
            adam_step(&mut model.store, grads.params(), &mut state)?;
            history.push(LossRecord { phase: 1, epoch, step, loss: value });
        }
    }

    model.store.set_frozen(EVENT_GROUP, true)?;
    model.store.set_frozen(CONTEXT_GROUP, false)?;
    let tables: Vec<Tensor<f32>> =
        datasets.iter().map(|d| model.event_embedding_table(lexicon, &d.codes)).collect::<Result<_>>()?;
    let masked = model.masked_event_embedding(lexicon)?;
    let mut state = AdamState::new(adam);
    for epoch in 0..config.epochs_phase2 {
        let draws = plan.epoch((config.epochs_phase1 + epoch) as u64);
        for (step, chunk) in draws.chunks(config.batch_size).filter(|c| c.len() >= 2).enumerate() {
            let mut batch = WindowBatch::default();
            let mut augmented = Vec::with_capacity(chunk.len());
            for d in chunk {
                let ds = &datasets[d.dataset];
                seen.insert(ds.name.clone());
                let start = ds.starts[d.window];
                batch.push_window(d.dataset, start, &ds.codes[start..start + ds.window], &vec![SlotMask::NONE; ds.window])?;
                augmented.push(augment_mask_event(ds.window, config.p_event_mask, &mut rng));
            }
            for (d, aug) in chunk.iter().zip(&augmented) {
                let ds = &datasets[d.dataset];
                let start = ds.starts[d.window];
                batch.push_window(d.dataset, start, &ds.codes[start..start + ds.window], &aug.masks)?;
            }
            let mut g = Graph::new();
            let rows = g.constant(batch.cached_rows(&tables, &masked));
            let ctx = model.context.forward(&mut g, &model.store, rows, &batch.groups)?;
            let pooled = pool_sequence(&mut g, ctx, &batch.groups)?;
            let loss = pair_loss(&mut g, pooled, chunk.len(), config)?;
            let value = g.value(loss).item();
            check_loss(value, 2, epoch, step)?;
            let grads = g.backward(loss)?;
            adam_step(&mut model.store, grads.params(), &mut state)?;
            history.push(LossRecord { phase: 2, epoch, step, loss: value });
        }
    }
    Ok(PretrainReport { history, datasets_seen: seen.into_iter().collect() })
}

/// Splits pooled rows into the first `b` (originals) and the next `b`
/// (augmented copies) and scores them.
fn pair_loss(g: &mut Graph<f32>, pooled: NodeId, b: usize, config: &PretrainConfig) -> Result<NodeId> {
    let anchors = g.gather(pooled, (0..b).collect())?;
    let positives = g.gather(pooled, (b..2 * b).collect())?;
    infonce(g, anchors, positives, config.temperature, config.symmetric)
}
