//! Event-count and time-interval windows over a global stream.

use std::sync::Arc;

use crate::error::{config_err, Result};
use crate::event::{Event, EventStream};

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// Index of the source dataset.
    pub dataset: usize,
    /// Stream index of the first event.
    pub start: usize,
    pub events: Vec<Event>,
    pub label: Option<Arc<str>>,
}

impl Window {
    fn new(dataset: usize, start: usize, events: Vec<Event>) -> Self {
        let label = events.last().and_then(|e| e.activity.clone());
        Self { dataset, start, events, label }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Stream index of the last event.
    pub fn end(&self) -> usize {
        self.start + self.events.len() - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SegmentationConfig {
    EventBased { n: usize, overlap: usize },
    TimeBased { delta_t: f64, overlap: f64 },
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SegmentationConfig::EventBased { n, overlap } if n == 0 || overlap >= n => {
                Err(config_err(format!("event windows need 0 <= overlap < N, got N={n} overlap={overlap}")))
            }
            SegmentationConfig::TimeBased { delta_t, overlap } if !(delta_t > 0.0) || !(0.0..1.0).contains(&overlap) => {
                Err(config_err(format!("time windows need delta_t > 0 and overlap in [0,1), got {delta_t}, {overlap}")))
            }
            _ => Ok(()),
        }
    }

    pub fn segment(&self, stream: &EventStream, dataset: usize) -> Result<Vec<Window>> {
        match *self {
            SegmentationConfig::EventBased { n, overlap } => segment_events(stream, dataset, n, overlap),
            SegmentationConfig::TimeBased { delta_t, overlap } => segment_time(stream, dataset, delta_t, overlap),
        }
    }
}

/// Start indices of the event-count windows; empty when the stream is
/// shorter than `n`.
pub fn window_starts(len: usize, n: usize, overlap: usize) -> Result<Vec<usize>> {
    SegmentationConfig::EventBased { n, overlap }.validate()?;
    if len < n {
        return Ok(Vec::new());
    }
    Ok((0..=len - n).step_by(n - overlap).collect())
}

/// Windows of `n` consecutive events advancing by `n - overlap`.
pub fn segment_events(stream: &EventStream, dataset: usize, n: usize, overlap: usize) -> Result<Vec<Window>> {
    Ok(window_starts(stream.len(), n, overlap)?
        .into_iter()
        .map(|s| Window::new(dataset, s, stream.events[s..s + n].to_vec()))
        .collect())
}

/// Windows holding the events with `t` in the closed interval
/// `[t_j, t_j + delta_t]`, starts advancing by `delta_t * (1 - overlap)`
/// from the first timestamp. Intervals without events are skipped.
pub fn segment_time(stream: &EventStream, dataset: usize, delta_t: f64, overlap: f64) -> Result<Vec<Window>> {
    SegmentationConfig::TimeBased { delta_t, overlap }.validate()?;
    let (Some(first), Some(last)) = (stream.events.first(), stream.events.last()) else {
        return Ok(Vec::new());
    };
    let stride = delta_t * (1.0 - overlap);
    let t0 = first.timestamp as f64;
    let mut out = Vec::new();
    for j in 0u64.. {
        let lo = t0 + j as f64 * stride;
        if lo > last.timestamp as f64 {
            break;
        }
        let hi = lo + delta_t;
        let a = stream.events.partition_point(|e| (e.timestamp as f64) < lo);
        let b = stream.events.partition_point(|e| (e.timestamp as f64) <= hi);
        if a < b {
            out.push(Window::new(dataset, a, stream.events[a..b].to_vec()));
        }
    }
    Ok(out)
}

/// Activity of the last event.
pub fn window_label(window: &Window) -> Option<Arc<str>> {
    window.events.last().and_then(|e| e.activity.clone())
}
