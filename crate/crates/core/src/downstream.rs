//! Task heads and fine-tuning for activity recognition and next-k event
//! forecasting. Heads read the mean-pooled window representation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use domus_nn::{adam_step, AdamConfig, AdamState, Graph, Linear, NodeId, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::Lexicon;
use crate::error::{config_err, data_err, CoreError, Result};
use crate::event::{Event, Status};
use crate::event_encoder::{EventCode, SlotMask};
use crate::model::{Model, WindowBatch, CONTEXT_GROUP, EVENT_GROUP};

pub const ADL_GROUP: &str = "adl_head";
pub const NEXTK_GROUP: &str = "nextk_head";

/// `(sensor id, status)`.
pub type EventType = (String, Status);

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventMultiset {
    pub counts: BTreeMap<EventType, u32>,
}

impl EventMultiset {
    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a Event>) -> Self {
        let mut counts = BTreeMap::new();
        for e in events {
            *counts.entry((e.sensor.id.clone(), e.status)).or_insert(0) += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> u32 {
        self.counts.values().sum()
    }

    pub fn get(&self, t: &EventType) -> u32 {
        self.counts.get(t).copied().unwrap_or(0)
    }

    pub fn insert(&mut self, t: EventType, n: u32) {
        if n > 0 {
            *self.counts.entry(t).or_insert(0) += n;
        }
    }
}

impl fmt::Display for EventMultiset {
    /// `sensor:STATUS=n` items joined by `;`, in type order.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, ((s, st), n)) in self.counts.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{s}:{st}={n}")?;
        }
        Ok(())
    }
}

/// Counts of the `k` events right after the window ending at stream index
/// `window_end`; `None` when fewer than `k` events follow.
pub fn nextk_target(events: &[Event], window_end: usize, k: usize) -> Option<EventMultiset> {
    let from = window_end + 1;
    if k == 0 || from + k > events.len() {
        return None;
    }
    Some(EventMultiset::from_events(&events[from..from + k]))
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Integer counts summing to `k`: floors of `expected` rescaled to sum `k`,
/// then one extra unit to each of the largest fractional remainders (lowest
/// index first on ties). An all-zero or unusable input is treated as uniform.
pub fn largest_remainder(expected: &[f64], k: u32) -> Vec<u32> {
    let n = expected.len();
    if n == 0 {
        return Vec::new();
    }
    let clean: Vec<f64> = expected.iter().map(|&x| if x.is_finite() && x > 0.0 { x } else { 0.0 }).collect();
    let sum: f64 = clean.iter().sum();
    let weights = if sum > 0.0 && sum.is_finite() { clean } else { vec![1.0; n] };
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * f64::from(k)).collect();
    let mut counts: Vec<u32> = quotas.iter().map(|q| q.floor() as u32).collect();
    let assigned: u32 = counts.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(k.saturating_sub(assigned) as usize) {
        counts[i] += 1;
    }
    counts
}

/// Decodes expected counts over `vocab` into a multiset of exactly `k` events.
pub fn nextk_predict(expected: &[f32], vocab: &[EventType], k: u32) -> EventMultiset {
    let exp: Vec<f64> = expected.iter().map(|&v| f64::from(v)).collect();
    let mut out = EventMultiset::default();
    for (t, n) in vocab.iter().zip(largest_remainder(&exp, k)) {
        out.insert(t.clone(), n);
    }
    out
}

#[derive(Clone, Debug)]
pub struct AdlHead {
    pub classes: Vec<String>,
    pub linear: Linear,
}

impl AdlHead {
    /// Adds the `adl_head` group to the model's store.
    pub fn attach(model: &mut Model, classes: Vec<String>, seed: u64) -> Result<Self> {
        if classes.len() < 2 {
            return Err(config_err(format!("activity head needs at least 2 classes, got {}", classes.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let group = model.store.add_group(ADL_GROUP)?;
        let linear = Linear::new(&mut model.store, group, "linear", model.config.d, classes.len(), &mut rng)?;
        Ok(Self { classes, linear })
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| data_err(format!("unknown activity label {label:?}")))
    }

    pub fn forward(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, pooled: NodeId) -> Result<NodeId> {
        Ok(self.linear.forward(g, store, pooled)?)
    }

    /// Logits and predicted class for each pooled row.
    pub fn predict(&self, store: &ParamStore<f32>, pooled: &Tensor<f32>) -> Result<Vec<(Vec<f32>, usize)>> {
        let mut g = Graph::new();
        let x = g.constant(pooled.clone());
        let logits = self.forward(&mut g, store, x)?;
        let t = g.value(logits);
        Ok((0..t.rows()).map(|r| (t.row(r).to_vec(), argmax(t.row(r)))).collect())
    }
}

#[derive(Clone, Debug)]
pub struct NextKHead {
    pub vocab: Vec<EventType>,
    pub k: usize,
    pub type_head: Linear,
    pub count_head: Linear,
    index: HashMap<EventType, usize>,
}

impl NextKHead {
    /// Adds the `nextk_head` group; `vocab` is every `(sensor, status)` of
    /// the target dataset.
    pub fn attach(model: &mut Model, vocab: Vec<EventType>, k: usize, seed: u64) -> Result<Self> {
        if vocab.is_empty() || k == 0 {
            return Err(config_err("next-k head needs a nonempty vocabulary and k ≥ 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let group = model.store.add_group(NEXTK_GROUP)?;
        let d = model.config.d;
        let type_head = Linear::new(&mut model.store, group, "type", d, vocab.len(), &mut rng)?;
        let count_head = Linear::new(&mut model.store, group, "count", d, vocab.len(), &mut rng)?;
        let index = vocab.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Ok(Self { vocab, k, type_head, count_head, index })
    }

    /// Vocabulary of a dataset: all sensors in both statuses.
    pub fn vocabulary<'a>(sensor_ids: impl IntoIterator<Item = &'a str>) -> Vec<EventType> {
        let mut v: Vec<EventType> =
            sensor_ids.into_iter().flat_map(|s| [(s.to_string(), Status::On), (s.to_string(), Status::Off)]).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Target multiset as a count vector over the vocabulary.
    pub fn count_vector(&self, target: &EventMultiset) -> Result<Vec<f32>> {
        let mut v = vec![0.0; self.vocab.len()];
        for (t, &n) in &target.counts {
            let i = self.index.get(t).ok_or_else(|| data_err(format!("event type {}:{} not in vocabulary", t.0, t.1)))?;
            v[*i] = n as f32;
        }
        Ok(v)
    }

    /// `(type logits, expected counts)`.
    pub fn forward(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, pooled: NodeId) -> Result<(NodeId, NodeId)> {
        let types = self.type_head.forward(g, store, pooled)?;
        let raw = self.count_head.forward(g, store, pooled)?;
        Ok((types, g.softplus(raw)))
    }

    pub fn predict(&self, store: &ParamStore<f32>, pooled: &Tensor<f32>) -> Result<Vec<EventMultiset>> {
        let mut g = Graph::new();
        let x = g.constant(pooled.clone());
        let (_, counts) = self.forward(&mut g, store, x)?;
        let t = g.value(counts);
        Ok((0..t.rows()).map(|r| nextk_predict(t.row(r), &self.vocab, self.k as u32)).collect())
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Adl(AdlHead),
    NextK(NextKHead),
}

impl Head {
    pub fn group(&self) -> &'static str {
        match self {
            Head::Adl(_) => ADL_GROUP,
            Head::NextK(_) => NEXTK_GROUP,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneStrategy {
    /// Same as `HeadOnly`: there is no fixed head, so the head is trained.
    FrozenFeatures,
    HeadOnly,
    Full,
}

impl FinetuneStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "frozen_features" => Ok(Self::FrozenFeatures),
            "head_only" => Ok(Self::HeadOnly),
            "full" => Ok(Self::Full),
            _ => Err(config_err(format!("unknown fine-tuning strategy {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FrozenFeatures => "frozen_features",
            Self::HeadOnly => "head_only",
            Self::Full => "full",
        }
    }

    pub fn trains_backbone(self) -> bool {
        self == Self::Full
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    /// Counts over the next-k vocabulary.
    Counts(Vec<f32>),
}

/// A labeled window `codes[start..start + window]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub start: usize,
    pub target: Target,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub strategy: FinetuneStrategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the count MSE in the next-k loss.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { strategy: FinetuneStrategy::Full, epochs: 10, batch_size: 16, lr: 1e-3, lambda: 1.0, seed: 0 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.lambda >= 0.0) {
            return Err(config_err("lr must be positive and lambda nonnegative"));
        }
        Ok(())
    }
}

/// Sets freeze flags for `strategy`: the head always trains, the encoders
/// only under `Full`.
pub fn apply_strategy(model: &mut Model, head: &Head, strategy: FinetuneStrategy) -> Result<()> {
    let frozen = !strategy.trains_backbone();
    model.store.set_frozen(EVENT_GROUP, frozen)?;
    model.store.set_frozen(CONTEXT_GROUP, frozen)?;
    model.store.set_frozen(head.group(), false)?;
    Ok(())
}

fn head_loss(
    g: &mut Graph<f32>,
    store: &ParamStore<f32>,
    head: &Head,
    pooled: NodeId,
    targets: &[&Target],
    lambda: f64,
) -> Result<NodeId> {
    let b = targets.len();
    match head {
        Head::Adl(h) => {
            let c = h.classes.len();
            let mut onehot = Tensor::zeros(&[b, c]);
            for (r, t) in targets.iter().enumerate() {
                let Target::Class(i) = t else { return Err(data_err("activity head given a count target")) };
                if *i >= c {
                    return Err(data_err(format!("class index {i} out of range")));
                }
                onehot.data_mut()[r * c + i] = 1.0;
            }
            let logits = h.forward(g, store, pooled)?;
            Ok(g.softmax_cross_entropy(logits, &onehot)?)
        }
        Head::NextK(h) => {
            let v = h.vocab.len();
            let mut counts = Vec::with_capacity(b * v);
            for t in targets {
                let Target::Counts(c) = t else { return Err(data_err("next-k head given a class target")) };
                if c.len() != v {
                    return Err(data_err(format!("count target of length {} for vocabulary {v}", c.len())));
                }
                counts.extend_from_slice(c);
            }
            let counts = Tensor::new(vec![b, v], counts)?;
            let mut dist = counts.clone();
            for row in dist.data_mut().chunks_exact_mut(v) {
                let s: f32 = row.iter().sum();
                if s > 0.0 {
                    row.iter_mut().for_each(|x| *x /= s);
                }
            }
            let (types, expected) = h.forward(g, store, pooled)?;
            let ce = g.softmax_cross_entropy(types, &dist)?;
            let mse = g.mse(expected, &counts)?;
            let mse = g.scale(mse, lambda as f32);
            Ok(g.add(ce, mse)?)
        }
    }
}

/// Trains `head` (and the encoders under `Full`) on `examples` for the
/// configured epochs without early stopping. Returns the mean loss of each
/// epoch.
pub fn finetune(
    model: &mut Model,
    head: &Head,
    lexicon: &Lexicon,
    codes: &[EventCode],
    window: usize,
    examples: &[Example],
    config: &FinetuneConfig,
) -> Result<Vec<f32>> {
    config.validate()?;
    if examples.is_empty() {
        return Err(data_err("empty fine-tuning set"));
    }
    apply_strategy(model, head, config.strategy)?;
    let starts: Vec<usize> = examples.iter().map(|e| e.start).collect();
    if window == 0 || starts.iter().any(|&s| s + window > codes.len()) {
        return Err(data_err("window runs past the end of the stream"));
    }
    let cached = if config.strategy.trains_backbone() {
        None
    } else {
        Some(model.pooled_embeddings(lexicon, codes, window, &starts)?)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut steps = 0usize;
        for idx in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let pooled = match &cached {
                Some(table) => {
                    let all = g.constant(table.clone());
                    g.gather(all, idx.to_vec())?
                }
                None => {
                    let mut batch = WindowBatch::default();
                    for &i in idx {
                        let s = examples[i].start;
                        batch.push_window(0, s, &codes[s..s + window], &vec![SlotMask::NONE; window])?;
                    }
                    model.window_embeddings(&mut g, &model.store, lexicon, &batch)?
                }
            };
            let targets: Vec<&Target> = idx.iter().map(|&i| &examples[i].target).collect();
            let loss = head_loss(&mut g, &model.store, head, pooled, &targets, config.lambda)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(CoreError::NonFinite(format!("fine-tuning loss {value} at epoch {epoch}, step {steps}")));
            }
            let grads = g.backward(loss)?;
            adam_step(&mut model.store, grads.params(), &mut state)?;
            total += f64::from(value);
            steps += 1;
        }
        history.push((total / steps as f64) as f32);
    }
    Ok(history)
}
