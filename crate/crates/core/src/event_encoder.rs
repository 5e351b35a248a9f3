//! Per-event embedding `h_e`.
//!
//! An event becomes seven slot vectors: three attribute names (house item,
//! room, sensor type), day of week, hour, second-of-hour bucket and status.
//! Each slot gets its learned slot embedding added, one self-attention layer
//! (with residual) mixes the seven slots of the event, and the mean over the
//! slots is passed through a final linear map.
//!
//! Batches are built from small per-slot tables (projected text vectors for
//! the tokens present, NULL and MASK rows, the 7 weekdays, 24 hours, second
//! buckets and statuses), which are concatenated and gathered into
//! event-major slot rows.

use std::f64::consts::PI;

use domus_nn::params::uniform;
use domus_nn::{Graph, Group, Linear, MultiHeadAttention, NodeId, ParamId, ParamStore, Real, Tensor};
use rand::Rng;

use crate::embedding::Lexicon;
use crate::error::{config_err, data_err, Result};
use crate::event::{extract_time_features, Event, Status, TimeFeatures};

pub const NUM_SLOTS: usize = 7;
pub const NUM_TEXT_SLOTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    HouseItem = 0,
    Room = 1,
    SensorType = 2,
    DayOfWeek = 3,
    Hour = 4,
    Second = 5,
    Status = 6,
}

impl Slot {
    pub const ALL: [Slot; NUM_SLOTS] =
        [Slot::HouseItem, Slot::Room, Slot::SensorType, Slot::DayOfWeek, Slot::Hour, Slot::Second, Slot::Status];
}

/// Bit `i` set means slot `i` is replaced by its MASK vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotMask(pub u8);

impl SlotMask {
    pub const NONE: SlotMask = SlotMask(0);
    pub const ALL: SlotMask = SlotMask((1 << NUM_SLOTS) - 1);

    pub fn single(slot: Slot) -> Self {
        SlotMask(1 << slot as u8)
    }

    pub fn is_masked(self, slot: usize) -> bool {
        self.0 & (1 << slot) != 0
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }
}

/// Model-ready form of an event: interned attribute tokens (`None` is NULL),
/// calendar features and status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventCode {
    pub text: [Option<u32>; NUM_TEXT_SLOTS],
    pub time: TimeFeatures,
    pub status: Status,
}

impl EventCode {
    pub fn from_event(event: &Event, lexicon: &mut Lexicon, utc_offset: i32) -> Result<Self> {
        let s = &event.sensor;
        Ok(Self {
            text: [
                lexicon.intern(s.house_item.as_deref()),
                lexicon.intern(s.room.as_deref()),
                lexicon.intern(Some(&s.sensor_type)),
            ],
            time: extract_time_features(event.timestamp, utc_offset)?,
            status: event.status,
        })
    }
}

pub fn encode_events(events: &[Event], lexicon: &mut Lexicon, utc_offset: i32) -> Result<Vec<EventCode>> {
    events.iter().map(|e| EventCode::from_event(e, lexicon, utc_offset)).collect()
}

/// `(sin(2πm·x/P), cos(2πm·x/P))` for `m = 1..=harmonics`, with `x` reduced
/// modulo `P` first so that whole periods are exactly invisible.
pub fn harmonic_features(x: f64, period: f64, harmonics: usize) -> Vec<f64> {
    let x = x.rem_euclid(period);
    let mut out = Vec::with_capacity(2 * harmonics);
    for m in 1..=harmonics {
        let angle = 2.0 * PI * m as f64 * x / period;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventEncoderConfig {
    pub d: usize,
    pub d_text: usize,
    pub heads: usize,
    pub harmonics: usize,
    pub seconds_buckets: usize,
}

impl EventEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_text == 0 {
            return Err(config_err("embedding dimensions must be positive"));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(config_err(format!("d={} is not divisible by heads={}", self.d, self.heads)));
        }
        if self.harmonics == 0 {
            return Err(config_err("harmonics must be at least 1"));
        }
        if self.seconds_buckets == 0 || 3600 % self.seconds_buckets != 0 {
            return Err(config_err(format!("seconds_buckets={} must divide 3600", self.seconds_buckets)));
        }
        Ok(())
    }

    pub fn second_bucket(&self, sec_in_hour: u16) -> usize {
        usize::from(sec_in_hour) / (3600 / self.seconds_buckets)
    }
}

#[derive(Clone, Debug)]
pub struct EventEncoder {
    pub config: EventEncoderConfig,
    /// Text → d projection per attribute slot.
    pub text_proj: [Linear; NUM_TEXT_SLOTS],
    /// Per attribute slot: row 0 NULL, row 1 MASK.
    pub text_special: [ParamId; NUM_TEXT_SLOTS],
    pub dow_proj: Linear,
    pub hour_proj: Linear,
    /// Row 0 masks the weekday, row 1 the hour.
    pub time_mask: ParamId,
    /// One row per bucket plus a final MASK row.
    pub seconds: ParamId,
    /// ON, OFF, MASK.
    pub status: ParamId,
    pub slot_embedding: ParamId,
    pub attention: MultiHeadAttention,
    pub fuse: Linear,
}

fn table_init<T: Real, R: Rng>(rng: &mut R, rows: usize, d: usize) -> Tensor<T> {
    uniform(rng, rows, d, (3.0 / d as f64).sqrt())
}

impl EventEncoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        group: usize,
        config: EventEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let EventEncoderConfig { d, d_text, heads, harmonics, seconds_buckets } = config;
        let names = ["house_item", "room", "sensor_type"];
        let mut proj = Vec::new();
        let mut special = Vec::new();
        for name in names {
            proj.push(Linear::new(store, group, &format!("{name}.proj"), d_text, d, rng)?);
            special.push(store.add(group, &format!("{name}.special"), table_init(rng, 2, d))?);
        }
        Ok(Self {
            config,
            text_proj: proj.try_into().expect("three slots"),
            text_special: special.try_into().expect("three slots"),
            dow_proj: Linear::new(store, group, "dow.proj", 2 * harmonics, d, rng)?,
            hour_proj: Linear::new(store, group, "hour.proj", 2 * harmonics, d, rng)?,
            time_mask: store.add(group, "time.mask", table_init(rng, 2, d))?,
            seconds: store.add(group, "seconds.table", table_init(rng, seconds_buckets + 1, d))?,
            status: store.add(group, "status.table", table_init(rng, 3, d))?,
            slot_embedding: store.add(group, "slot.embedding", table_init(rng, NUM_SLOTS, d))?,
            attention: MultiHeadAttention::new(store, group, "attention", d, heads, rng)?,
            fuse: Linear::new(store, group, "fuse", d, d, rng)?,
        })
    }

    fn harmonic_matrix<T: Real>(&self, g: &mut Graph<T>, values: usize, period: f64) -> NodeId {
        let h = self.config.harmonics;
        let data = (0..values).flat_map(|x| harmonic_features(x as f64, period, h)).map(T::lit).collect();
        g.constant(Tensor::new(vec![values, 2 * h], data).expect("harmonic matrix"))
    }

    /// Weekday, hour and second vectors of one timestamp (before slot
    /// embeddings are added).
    pub fn encode_temporal<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        time: TimeFeatures,
    ) -> Result<[NodeId; 3]> {
        if time.day_of_week > 6 || time.hour > 23 || time.sec_in_hour > 3599 {
            return Err(data_err(format!("time features out of range: {time:?}")));
        }
        let h = self.config.harmonics;
        let mut proj = |lin: &Linear, x: f64, period: f64| -> Result<NodeId> {
            let f = harmonic_features(x, period, h).into_iter().map(T::lit).collect();
            let c = g.constant(Tensor::new(vec![1, 2 * h], f).expect("row"));
            Ok(lin.forward(g, store, c)?)
        };
        let dow = proj(&self.dow_proj, f64::from(time.day_of_week), 7.0)?;
        let hour = proj(&self.hour_proj, f64::from(time.hour), 24.0)?;
        let table = g.param(store, self.seconds);
        let sec = g.gather(table, vec![self.config.second_bucket(time.sec_in_hour)])?;
        Ok([dow, hour, sec])
    }

    /// Status vector; `None` selects the MASK row.
    pub fn encode_status<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        status: Option<Status>,
    ) -> Result<NodeId> {
        let row = match status {
            Some(Status::On) => 0,
            Some(Status::Off) => 1,
            None => 2,
        };
        let table = g.param(store, self.status);
        Ok(g.gather(table, vec![row])?)
    }

    /// Slot vectors (slot embedding included), `7n × d` in event-major order.
    pub fn slot_inputs<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        lexicon: &Lexicon,
        codes: &[EventCode],
        masks: &[SlotMask],
    ) -> Result<NodeId> {
        if codes.is_empty() || codes.len() != masks.len() {
            return Err(data_err(format!("{} events with {} masks", codes.len(), masks.len())));
        }
        let cfg = &self.config;
        let mut used: Vec<u32> = codes
            .iter()
            .zip(masks)
            .flat_map(|(c, m)| (0..NUM_TEXT_SLOTS).filter(move |&s| !m.is_masked(s)).filter_map(move |s| c.text[s]))
            .collect();
        used.sort_unstable();
        used.dedup();
        let text = (!used.is_empty()).then(|| {
            let data = used.iter().flat_map(|&id| lexicon.vector(id).iter().map(|&v| T::lit(f64::from(v)))).collect();
            g.constant(Tensor::new(vec![used.len(), cfg.d_text], data).expect("text matrix"))
        });

        let slot_emb = g.param(store, self.slot_embedding);
        let mut tables = Vec::with_capacity(NUM_SLOTS);
        let mut add_slot = |g: &mut Graph<T>, table: NodeId, slot: usize| -> Result<()> {
            let row = g.gather(slot_emb, vec![slot])?;
            tables.push(g.add_bias(table, row)?);
            Ok(())
        };
        for s in 0..NUM_TEXT_SLOTS {
            let special = g.param(store, self.text_special[s]);
            let table = match text {
                Some(t) => {
                    let p = self.text_proj[s].forward(g, store, t)?;
                    g.concat_rows(&[p, special])?
                }
                None => special,
            };
            add_slot(g, table, s)?;
        }
        let time_mask = g.param(store, self.time_mask);
        for (slot, lin, values, period, mask_row) in
            [(3, &self.dow_proj, 7, 7.0, 0), (4, &self.hour_proj, 24, 24.0, 1)]
        {
            let feats = self.harmonic_matrix(g, values, period);
            let p = lin.forward(g, store, feats)?;
            let m = g.gather(time_mask, vec![mask_row])?;
            let table = g.concat_rows(&[p, m])?;
            add_slot(g, table, slot)?;
        }
        let seconds = g.param(store, self.seconds);
        add_slot(g, seconds, 5)?;
        let status = g.param(store, self.status);
        add_slot(g, status, 6)?;
        let all = g.concat_rows(&tables)?;

        let u = used.len();
        let text_rows = u + 2;
        let offsets = [
            0,
            text_rows,
            2 * text_rows,
            3 * text_rows,
            3 * text_rows + 8,
            3 * text_rows + 8 + 25,
            3 * text_rows + 8 + 25 + cfg.seconds_buckets + 1,
        ];
        let mut idx = Vec::with_capacity(NUM_SLOTS * codes.len());
        for (c, &m) in codes.iter().zip(masks) {
            for s in 0..NUM_TEXT_SLOTS {
                let local = if m.is_masked(s) {
                    u + 1
                } else {
                    match c.text[s] {
                        Some(id) => used.binary_search(&id).expect("token collected"),
                        None => u,
                    }
                };
                idx.push(offsets[s] + local);
            }
            let t = c.time;
            idx.push(offsets[3] + if m.is_masked(3) { 7 } else { usize::from(t.day_of_week) });
            idx.push(offsets[4] + if m.is_masked(4) { 24 } else { usize::from(t.hour) });
            idx.push(offsets[5] + if m.is_masked(5) { cfg.seconds_buckets } else { cfg.second_bucket(t.sec_in_hour) });
            let st = match (m.is_masked(6), c.status) {
                (true, _) => 2,
                (false, Status::On) => 0,
                (false, Status::Off) => 1,
            };
            idx.push(offsets[6] + st);
        }
        Ok(g.gather(all, idx)?)
    }

    /// `h_e` for each event, `n × d`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        lexicon: &Lexicon,
        codes: &[EventCode],
        masks: &[SlotMask],
    ) -> Result<NodeId> {
        let x = self.slot_inputs(g, store, lexicon, codes, masks)?;
        let groups: Vec<Group> = (0..codes.len()).map(|e| (e * NUM_SLOTS, NUM_SLOTS)).collect();
        let a = self.attention.forward(g, store, x, &groups)?;
        let y = g.add(x, a)?;
        let pooled = g.group_mean(y, &groups)?;
        Ok(self.fuse.forward(g, store, pooled)?)
    }

    /// `h_e` of a single event as a `1 × d` node.
    pub fn encode_event<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        lexicon: &Lexicon,
        code: &EventCode,
        mask: SlotMask,
    ) -> Result<NodeId> {
        self.forward(g, store, lexicon, std::slice::from_ref(code), &[mask])
    }
}
