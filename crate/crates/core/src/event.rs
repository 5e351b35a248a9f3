//! Sensors, events and the global event stream.
//!
//! Timestamps are integer seconds since the Unix epoch and strictly positive.
//! A stream is valid when its timestamps strictly increase; every operation
//! that requires that checks it and rejects violations.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, Datelike, Timelike};

use crate::error::{data_err, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sensor {
    pub id: String,
    pub house_item: Option<String>,
    pub room: Option<String>,
    pub sensor_type: String,
}

impl Sensor {
    /// Empty attribute strings are stored as NULL.
    pub fn new(id: &str, house_item: Option<&str>, room: Option<&str>, sensor_type: &str) -> Result<Self> {
        if id.is_empty() {
            return Err(data_err("sensor id must be nonempty"));
        }
        if sensor_type.is_empty() {
            return Err(data_err(format!("sensor {id} has an empty type")));
        }
        Ok(Self {
            id: id.to_string(),
            house_item: house_item.filter(|s| !s.is_empty()).map(str::to_string),
            room: room.filter(|s| !s.is_empty()).map(str::to_string),
            sensor_type: sensor_type.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Status {
    On,
    Off,
}

impl Status {
    /// Case-insensitive parse of `ON` / `OFF`.
    pub fn parse(token: &str) -> Option<Status> {
        if token.eq_ignore_ascii_case("on") {
            Some(Status::On)
        } else if token.eq_ignore_ascii_case("off") {
            Some(Status::Off)
        } else {
            None
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::On => "ON",
            Status::Off => "OFF",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One status change. The activity label travels with the event so that
/// cleaning and merging keep labels aligned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub timestamp: i64,
    pub sensor: Arc<Sensor>,
    pub status: Status,
    pub activity: Option<Arc<str>>,
}

impl Event {
    pub fn new(timestamp: i64, sensor: Arc<Sensor>, status: Status) -> Self {
        Self { timestamp, sensor, status, activity: None }
    }

    pub fn labeled(mut self, activity: &str) -> Self {
        self.activity = Some(Arc::from(activity));
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventStream {
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn new(events: Vec<Event>) -> Self {
        Self { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Timestamps positive and strictly increasing.
    pub fn check_sorted(&self) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            if e.timestamp <= 0 {
                return Err(data_err(format!("event {i} has non-positive timestamp {}", e.timestamp)));
            }
            if i > 0 && e.timestamp <= self.events[i - 1].timestamp {
                return Err(data_err(format!(
                    "stream not strictly sorted at event {i} ({} after {})",
                    e.timestamp,
                    self.events[i - 1].timestamp
                )));
            }
        }
        Ok(())
    }

    /// True when no sensor reports the same status twice in a row.
    pub fn alternates(&self) -> bool {
        let mut last: HashMap<&str, Status> = HashMap::new();
        self.events.iter().all(|e| last.insert(&e.sensor.id, e.status) != Some(e.status))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CleanReport {
    pub removed_count: usize,
    /// Indices into the input stream.
    pub removed_indices: Vec<usize>,
    /// Events moved by sorting before cleaning (zero when the input was sorted).
    pub reordered_count: usize,
}

/// Drops repeated statuses per sensor, keeping the first event of each run.
pub fn clean_alternation(stream: &EventStream) -> Result<(EventStream, CleanReport)> {
    stream.check_sorted()?;
    let mut last: HashMap<&str, Status> = HashMap::new();
    let mut kept = Vec::with_capacity(stream.len());
    let mut report = CleanReport::default();
    for (i, e) in stream.events.iter().enumerate() {
        if last.insert(&e.sensor.id, e.status) == Some(e.status) {
            report.removed_indices.push(i);
        } else {
            kept.push(e.clone());
        }
    }
    report.removed_count = report.removed_indices.len();
    Ok((EventStream::new(kept), report))
}

/// A named semantic state of a continuous signal: the half-open `[lo, hi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticState {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl SemanticState {
    pub fn new(name: &str, lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(data_err(format!("state {name}: need lo < hi, got [{lo}, {hi})")));
        }
        Ok(Self { name: name.to_string(), lo, hi })
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x < self.hi
    }
}

/// Turns samples of a continuous signal into one binary stream per state.
///
/// The derived sensor of state `j` is `{source.id}_{name}` and inherits the
/// source's attributes. ON is emitted where the indicator rises (including a
/// first sample inside the interval), OFF where it falls.
pub fn binarize_continuous(
    source: &Sensor,
    samples: &[(i64, f64)],
    states: &[SemanticState],
) -> Result<Vec<EventStream>> {
    for w in samples.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(data_err(format!("samples not sorted at t={}", w[1].0)));
        }
    }
    let mut names: Vec<&str> = states.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(data_err("semantic state names must be unique"));
    }
    let mut out = Vec::with_capacity(states.len());
    for state in states {
        let sensor = Arc::new(Sensor {
            id: format!("{}_{}", source.id, state.name),
            ..source.clone()
        });
        let mut events = Vec::new();
        let mut inside = false;
        for &(t, x) in samples {
            let now = state.contains(x);
            if now != inside {
                let status = if now { Status::On } else { Status::Off };
                events.push(Event::new(t, sensor.clone(), status));
                inside = now;
            }
        }
        out.push(EventStream::new(events));
    }
    Ok(out)
}

/// Merges sorted streams into one global stream with unique timestamps.
///
/// Events are ordered by (timestamp, sensor id, arrival); any event whose
/// timestamp does not exceed its predecessor's is moved to predecessor + 1.
pub fn merge_streams(streams: &[EventStream]) -> Result<EventStream> {
    for s in streams {
        for w in s.events.windows(2) {
            if w[1].timestamp < w[0].timestamp {
                return Err(data_err("input stream not sorted"));
            }
        }
    }
    let mut all: Vec<(usize, usize, &Event)> = streams
        .iter()
        .enumerate()
        .flat_map(|(si, s)| s.events.iter().enumerate().map(move |(i, e)| (si, i, e)))
        .collect();
    all.sort_by(|a, b| {
        a.2.timestamp
            .cmp(&b.2.timestamp)
            .then_with(|| a.2.sensor.id.cmp(&b.2.sensor.id))
            .then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
    });
    let mut events: Vec<Event> = Vec::with_capacity(all.len());
    for (_, _, e) in all {
        let mut e = e.clone();
        if let Some(prev) = events.last() {
            if e.timestamp <= prev.timestamp {
                e.timestamp = prev.timestamp + 1;
            }
        }
        events.push(e);
    }
    Ok(EventStream::new(events))
}

/// Stable sort by timestamp followed by the tie rule of [`merge_streams`];
/// returns the number of events whose position changed.
pub fn sort_and_dedupe_times(events: Vec<Event>) -> (EventStream, usize) {
    let mut idx: Vec<usize> = (0..events.len()).collect();
    idx.sort_by(|&a, &b| match events[a].timestamp.cmp(&events[b].timestamp) {
        Ordering::Equal => events[a].sensor.id.cmp(&events[b].sensor.id).then(a.cmp(&b)),
        o => o,
    });
    let reordered = idx.iter().enumerate().filter(|(pos, &i)| *pos != i).count();
    let mut out: Vec<Event> = Vec::with_capacity(events.len());
    for i in idx {
        let mut e = events[i].clone();
        if let Some(prev) = out.last() {
            if e.timestamp <= prev.timestamp {
                e.timestamp = prev.timestamp + 1;
            }
        }
        out.push(e);
    }
    (EventStream::new(out), reordered)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeFeatures {
    /// Monday = 0.
    pub day_of_week: u8,
    pub hour: u8,
    pub sec_in_hour: u16,
}

/// Calendar features in UTC shifted by `utc_offset` seconds.
pub fn extract_time_features(timestamp: i64, utc_offset: i32) -> Result<TimeFeatures> {
    if timestamp < 0 {
        return Err(data_err(format!("timestamp {timestamp} precedes 1970")));
    }
    let local = timestamp + i64::from(utc_offset);
    let dt = DateTime::from_timestamp(local, 0).ok_or_else(|| data_err(format!("timestamp {timestamp} out of range")))?;
    Ok(TimeFeatures {
        day_of_week: dt.weekday().num_days_from_monday() as u8,
        hour: dt.hour() as u8,
        sec_in_hour: (dt.minute() * 60 + dt.second()) as u16,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sensor(id: &str) -> Arc<Sensor> {
        Arc::new(Sensor::new(id, None, Some("kitchen"), "motion").unwrap())
    }

    fn stream(spec: &[(i64, &str, Status)]) -> EventStream {
        EventStream::new(spec.iter().map(|&(t, s, st)| Event::new(t, sensor(s), st)).collect())
    }

    fn summary(s: &EventStream) -> Vec<(i64, String, Status)> {
        s.events.iter().map(|e| (e.timestamp, e.sensor.id.clone(), e.status)).collect()
    }

    use Status::{Off, On};

    #[test]
    fn duplicate_on_is_dropped() {
        let (out, rep) = clean_alternation(&stream(&[(1, "M1", On), (5, "M1", On), (9, "M1", Off)])).unwrap();
        assert_eq!(summary(&out), vec![(1, "M1".into(), On), (9, "M1".into(), Off)]);
        assert_eq!(rep.removed_count, 1);
        assert_eq!(rep.removed_indices, vec![1]);
    }

    #[test]
    fn runs_keep_first() {
        let s = stream(&[(1, "A", On), (2, "A", On), (3, "A", On), (4, "A", Off), (5, "A", Off)]);
        let (out, rep) = clean_alternation(&s).unwrap();
        assert_eq!(summary(&out), vec![(1, "A".into(), On), (4, "A".into(), Off)]);
        assert_eq!(rep.removed_count, 3);
    }

    #[test]
    fn alternating_stream_unchanged() {
        let s = stream(&[(1, "A", On), (2, "B", On), (3, "A", Off), (4, "B", Off)]);
        let (out, rep) = clean_alternation(&s).unwrap();
        assert_eq!(out, s);
        assert_eq!(rep.removed_count, 0);
    }

    #[test]
    fn unsorted_rejected() {
        assert!(clean_alternation(&stream(&[(5, "A", On), (3, "A", Off)])).is_err());
        assert!(clean_alternation(&stream(&[(5, "A", On), (5, "B", Off)])).is_err());
    }

    #[test]
    fn binarize_high_temperature() {
        let t = Sensor::new("T1", None, Some("kitchen"), "temperature").unwrap();
        let high = SemanticState::new("HIGH", 30.0, f64::INFINITY).unwrap();
        let out = binarize_continuous(&t, &[(1, 25.0), (2, 31.0), (3, 29.0)], std::slice::from_ref(&high)).unwrap();
        assert_eq!(summary(&out[0]), vec![(2, "T1_HIGH".into(), On), (3, "T1_HIGH".into(), Off)]);

        let out = binarize_continuous(&t, &[(1, 10.0), (2, 12.0)], std::slice::from_ref(&high)).unwrap();
        assert!(out[0].is_empty());

        let out = binarize_continuous(&t, &[(7, 40.0)], &[high]).unwrap();
        assert_eq!(summary(&out[0]), vec![(7, "T1_HIGH".into(), On)]);
    }

    #[test]
    fn binarize_interval_is_half_open() {
        let t = Sensor::new("T1", None, None, "temperature").unwrap();
        let mid = SemanticState::new("MID", 20.0, 30.0).unwrap();
        let out = binarize_continuous(&t, &[(1, 20.0), (2, 30.0)], &[mid]).unwrap();
        assert_eq!(out[0].events.iter().map(|e| e.status).collect::<Vec<_>>(), vec![On, Off]);
        assert!(SemanticState::new("bad", 3.0, 3.0).is_err());
        assert!(binarize_continuous(&t, &[(2, 1.0), (1, 1.0)], &[]).is_err());
    }

    #[test]
    fn merge_resolves_ties_by_sensor_id() {
        let a = stream(&[(100, "A", On)]);
        let b = stream(&[(100, "B", On)]);
        let m = merge_streams(&[b, a]).unwrap();
        assert_eq!(summary(&m), vec![(100, "A".into(), On), (101, "B".into(), On)]);
    }

    #[test]
    fn merge_interleaves_and_single_is_identity() {
        let a = stream(&[(1, "A", On), (5, "A", Off)]);
        let b = stream(&[(3, "B", On), (7, "B", Off)]);
        let m = merge_streams(&[a.clone(), b]).unwrap();
        assert_eq!(m.events.iter().map(|e| e.timestamp).collect::<Vec<_>>(), vec![1, 3, 5, 7]);
        assert_eq!(merge_streams(std::slice::from_ref(&a)).unwrap(), a);
    }

    #[test]
    fn time_features() {
        // 2025-10-15 06:30:00 UTC, a Wednesday
        let tf = extract_time_features(1_760_509_800, 0).unwrap();
        assert_eq!(tf, TimeFeatures { day_of_week: 2, hour: 6, sec_in_hour: 1800 });
        // 2025-10-13 00:00:00 UTC, a Monday
        let tf = extract_time_features(1_760_313_600, 0).unwrap();
        assert_eq!(tf, TimeFeatures { day_of_week: 0, hour: 0, sec_in_hour: 0 });
        let tf = extract_time_features(1_760_313_600 + 23 * 3600 + 3599, 0).unwrap();
        assert_eq!(tf.sec_in_hour, 3599);
        assert!(extract_time_features(-1, 0).is_err());
        // a +2h offset moves midnight Monday to 02:00
        assert_eq!(extract_time_features(1_760_313_600, 7200).unwrap().hour, 2);
    }
}
