//! The two-stage window encoder and its batching.
//!
//! All learnable state lives in one `ParamStore` with one group per
//! component, so that freezing and checkpointing act on whole components.

use std::collections::{BTreeMap, HashMap};

use domus_nn::{Graph, Group, NodeId, ParamStore, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::context_encoder::{pool_sequence, ContextEncoder};
use crate::embedding::Lexicon;
use crate::error::{config_err, data_err, Result};
use crate::event::{Status, TimeFeatures};
use crate::event_encoder::{EventCode, EventEncoder, EventEncoderConfig, SlotMask};

pub const EVENT_GROUP: &str = "event_encoder";
pub const CONTEXT_GROUP: &str = "context_encoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub harmonics: usize,
    pub seconds_buckets: usize,
    pub context_enabled: bool,
}

impl Default for ModelConfig {
    /// Desk scale.
    fn default() -> Self {
        Self { d: 64, heads: 4, layers: 2, harmonics: 4, seconds_buckets: 60, context_enabled: true }
    }
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        Self { d: 384, heads: 12, layers: 12, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(config_err("layers must be at least 1"));
        }
        self.event_config(1).validate()
    }

    pub fn event_config(&self, d_text: usize) -> EventEncoderConfig {
        EventEncoderConfig {
            d: self.d,
            d_text,
            heads: self.heads,
            harmonics: self.harmonics,
            seconds_buckets: self.seconds_buckets,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub d_text: usize,
    pub event: EventEncoder,
    pub context: ContextEncoder,
    pub store: ParamStore<f32>,
}

impl Model {
    pub fn new(config: ModelConfig, d_text: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let eg = store.add_group(EVENT_GROUP)?;
        let event = EventEncoder::new(&mut store, eg, config.event_config(d_text), &mut rng)?;
        let cg = store.add_group(CONTEXT_GROUP)?;
        let context = ContextEncoder::new(&mut store, cg, config.d, config.heads, config.layers, &mut rng)?;
        Ok(Self { config, d_text, event, context, store })
    }

    /// Architecture description stored alongside checkpoints.
    pub fn metadata(&self) -> BTreeMap<String, String> {
        let c = &self.config;
        [
            ("model.d", c.d.to_string()),
            ("model.heads", c.heads.to_string()),
            ("model.layers", c.layers.to_string()),
            ("model.harmonics", c.harmonics.to_string()),
            ("model.seconds_buckets", c.seconds_buckets.to_string()),
            ("model.d_text", self.d_text.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Per-event `h_e` rows of every window in the batch (`Σ len × d`).
    pub fn event_rows<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        lexicon: &Lexicon,
        batch: &WindowBatch,
    ) -> Result<NodeId> {
        let h = self.event.forward(g, store, lexicon, &batch.codes, &batch.masks)?;
        Ok(g.gather(h, batch.rows.clone())?)
    }

    /// Contextualized rows, or the input rows when context is disabled.
    pub fn contextualize<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        rows: NodeId,
        groups: &[Group],
    ) -> Result<NodeId> {
        if self.config.context_enabled {
            self.context.forward(g, store, rows, groups)
        } else {
            Ok(rows)
        }
    }

    /// Pooled window embeddings, `windows × d`.
    pub fn window_embeddings<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        lexicon: &Lexicon,
        batch: &WindowBatch,
    ) -> Result<NodeId> {
        let rows = self.event_rows(g, store, lexicon, batch)?;
        let ctx = self.contextualize(g, store, rows, &batch.groups)?;
        pool_sequence(g, ctx, &batch.groups)
    }

    /// Contextualized and pooled representation of one window.
    pub fn window_representation(&self, lexicon: &Lexicon, codes: &[EventCode]) -> Result<WindowRepresentation> {
        let mut batch = WindowBatch::default();
        batch.push_window(0, 0, codes, &vec![SlotMask::NONE; codes.len()])?;
        let mut g = Graph::new();
        let rows = self.event_rows(&mut g, &self.store, lexicon, &batch)?;
        let ctx = self.contextualize(&mut g, &self.store, rows, &batch.groups)?;
        let pooled = pool_sequence(&mut g, ctx, &batch.groups)?;
        Ok(WindowRepresentation { contextualized: g.value(ctx).clone(), pooled: g.value(pooled).clone() })
    }

    /// `h_e` of every event, computed in chunks without gradients.
    pub fn event_embedding_table(&self, lexicon: &Lexicon, codes: &[EventCode]) -> Result<Tensor<f32>> {
        const CHUNK: usize = 512;
        let d = self.config.d;
        let mut data = Vec::with_capacity(codes.len() * d);
        for chunk in codes.chunks(CHUNK) {
            let mut g = Graph::new();
            let h = self.event.forward(&mut g, &self.store, lexicon, chunk, &vec![SlotMask::NONE; chunk.len()])?;
            data.extend_from_slice(g.value(h).data());
        }
        if data.is_empty() {
            return Err(data_err("no events to embed"));
        }
        Ok(Tensor::new(vec![codes.len(), d], data)?)
    }

    /// Pooled embeddings of the unmasked windows `codes[s..s + window]` for
    /// each start `s`, computed without gradients (`starts × d`).
    pub fn pooled_embeddings(
        &self,
        lexicon: &Lexicon,
        codes: &[EventCode],
        window: usize,
        starts: &[usize],
    ) -> Result<Tensor<f32>> {
        const CHUNK: usize = 64;
        let d = self.config.d;
        if starts.iter().any(|&s| s + window > codes.len()) || window == 0 {
            return Err(data_err("window runs past the end of the stream"));
        }
        let table = self.event_embedding_table(lexicon, codes)?;
        let unused = vec![0.0; d];
        let mut data = Vec::with_capacity(starts.len() * d);
        for chunk in starts.chunks(CHUNK) {
            let mut batch = WindowBatch::default();
            for &s in chunk {
                batch.push_window(0, s, &codes[s..s + window], &vec![SlotMask::NONE; window])?;
            }
            let mut g = Graph::new();
            let rows = g.constant(batch.cached_rows(std::slice::from_ref(&table), &unused));
            let ctx = self.contextualize(&mut g, &self.store, rows, &batch.groups)?;
            let pooled = pool_sequence(&mut g, ctx, &batch.groups)?;
            data.extend_from_slice(g.value(pooled).data());
        }
        Ok(Tensor::new(vec![starts.len(), d], data)?)
    }

    /// `h_e` of a fully masked event; identical for every event.
    pub fn masked_event_embedding(&self, lexicon: &Lexicon) -> Result<Vec<f32>> {
        let code = EventCode {
            text: [None; 3],
            time: TimeFeatures { day_of_week: 0, hour: 0, sec_in_hour: 0 },
            status: Status::On,
        };
        let mut g = Graph::new();
        let h = self.event.encode_event(&mut g, &self.store, lexicon, &code, SlotMask::ALL)?;
        Ok(g.value(h).data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowRepresentation {
    /// `N × d`.
    pub contextualized: Tensor<f32>,
    /// `1 × d`.
    pub pooled: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct EventKey {
    dataset: usize,
    index: usize,
    mask: SlotMask,
}

/// Windows flattened for one forward pass. Events shared by several windows
/// (same dataset, index and mask) are encoded once.
#[derive(Clone, Debug, Default)]
pub struct WindowBatch {
    /// Unique events to encode.
    pub codes: Vec<EventCode>,
    pub masks: Vec<SlotMask>,
    /// For each window event, its row among the unique events.
    pub rows: Vec<usize>,
    /// Row range of each window.
    pub groups: Vec<Group>,
    /// `(dataset, index, fully masked)` of each window event.
    pub refs: Vec<(usize, usize, bool)>,
    seen: HashMap<EventKey, usize>,
}

impl WindowBatch {
    /// `codes` are the window's events, which start at stream index `start`.
    pub fn push_window(&mut self, dataset: usize, start: usize, codes: &[EventCode], masks: &[SlotMask]) -> Result<()> {
        if codes.is_empty() || codes.len() != masks.len() {
            return Err(data_err(format!("window with {} events and {} masks", codes.len(), masks.len())));
        }
        self.groups.push((self.rows.len(), codes.len()));
        for (i, (c, &m)) in codes.iter().zip(masks).enumerate() {
            let key = EventKey { dataset, index: start + i, mask: m };
            let next = self.codes.len();
            let row = *self.seen.entry(key).or_insert(next);
            if row == next {
                self.codes.push(*c);
                self.masks.push(m);
            }
            self.rows.push(row);
            self.refs.push((dataset, start + i, m == SlotMask::ALL));
        }
        Ok(())
    }

    pub fn num_windows(&self) -> usize {
        self.groups.len()
    }

    /// Window-event rows looked up from precomputed `h_e` tables, with the
    /// shared masked-event vector for fully masked events.
    pub fn cached_rows<T: Real>(&self, tables: &[Tensor<f32>], masked: &[f32]) -> Tensor<T> {
        let d = masked.len();
        let mut data = Vec::with_capacity(self.refs.len() * d);
        for &(ds, idx, full) in &self.refs {
            let src = if full { masked } else { tables[ds].row(idx) };
            data.extend(src.iter().map(|&v| T::lit(f64::from(v))));
        }
        Tensor::new(vec![self.refs.len(), d], data).expect("batch rows")
    }
}
