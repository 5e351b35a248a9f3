//! `timestamp,sensor_id,house_item,room,sensor_type,status,activity`
//!
//! Timestamps are `YYYY-MM-DDTHH:MM:SS` in UTC, an empty field is NULL,
//! statuses are read case-insensitively and written uppercase, lines end in LF.

use std::collections::HashMap;
use std::sync::Arc;

use chrono::{DateTime, NaiveDateTime};

use super::Dataset;
use crate::error::{CoreError, Result};
use crate::event::{clean_alternation, sort_and_dedupe_times, CleanReport, Event, Sensor, Status};

pub const CSV_HEADER: [&str; 7] = ["timestamp", "sensor_id", "house_item", "room", "sensor_type", "status", "activity"];

const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

fn parse_err(line: u64, msg: impl Into<String>) -> CoreError {
    CoreError::Parse { line, msg: msg.into() }
}

fn opt(field: &str) -> Option<&str> {
    (!field.is_empty()).then_some(field)
}

pub fn parse_event_csv(name: &str, bytes: &[u8]) -> Result<Dataset> {
    parse_event_csv_report(name, bytes).map(|(d, _)| d)
}

/// Parses, sorts and alternation-cleans; the report covers both steps.
pub fn parse_event_csv_report(name: &str, bytes: &[u8]) -> Result<(Dataset, CleanReport)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(bytes);
    let mut sensors: HashMap<String, (Arc<Sensor>, u64)> = HashMap::new();
    let mut labels: HashMap<String, Arc<str>> = HashMap::new();
    let mut events = Vec::new();
    let mut saw_header = false;

    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let is_header = record.iter().eq(CSV_HEADER.iter().copied());
        if !saw_header {
            if !is_header {
                return Err(parse_err(line, format!("expected header `{}`", CSV_HEADER.join(","))));
            }
            saw_header = true;
            continue;
        }
        if is_header {
            return Err(parse_err(line, "duplicate header"));
        }
        if record.len() != CSV_HEADER.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", CSV_HEADER.len(), record.len())));
        }
        let f: Vec<&str> = record.iter().collect();
        let ts = NaiveDateTime::parse_from_str(f[0], TIME_FORMAT)
            .map_err(|e| parse_err(line, format!("bad timestamp {:?}: {e}", f[0])))?
            .and_utc()
            .timestamp();
        if ts <= 0 {
            return Err(parse_err(line, format!("timestamp {} is not after the epoch", f[0])));
        }
        let status = Status::parse(f[5]).ok_or_else(|| parse_err(line, format!("unknown status {:?}", f[5])))?;
        let sensor = Sensor::new(f[1], opt(f[2]), opt(f[3]), f[4]).map_err(|e| parse_err(line, e.to_string()))?;
        let sensor = match sensors.get(f[1]) {
            Some((known, first)) if **known != sensor => {
                return Err(parse_err(line, format!("sensor {} redefined (first seen on line {first})", f[1])))
            }
            Some((known, _)) => known.clone(),
            None => {
                let s = Arc::new(sensor);
                sensors.insert(f[1].to_string(), (s.clone(), line));
                s
            }
        };
        let activity = opt(f[6]).map(|a| labels.entry(a.to_string()).or_insert_with(|| Arc::from(a)).clone());
        events.push(Event { timestamp: ts, sensor, status, activity });
    }
    if !saw_header {
        return Err(parse_err(1, "missing header"));
    }

    let (sorted, reordered) = sort_and_dedupe_times(events);
    let (stream, mut report) = clean_alternation(&sorted)?;
    report.reordered_count = reordered;
    Ok((Dataset::from_stream(name, stream)?, report))
}

pub fn write_event_csv(dataset: &Dataset) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for e in &dataset.stream.events {
        let ts = DateTime::from_timestamp(e.timestamp, 0).expect("valid timestamp").format(TIME_FORMAT).to_string();
        let s = &e.sensor;
        w.write_record([
            ts.as_str(),
            &s.id,
            s.house_item.as_deref().unwrap_or(""),
            s.room.as_deref().unwrap_or(""),
            &s.sensor_type,
            e.status.as_str(),
            e.activity.as_deref().unwrap_or(""),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

#[cfg(test)]
mod tests {
    use super::*;

    const VALID: &str = "timestamp,sensor_id,house_item,room,sensor_type,status,activity\n\
        2025-10-15T06:30:00,M1,,kitchen,motion,ON,cook\n\
        2025-10-15T06:30:05,D1,fridge,kitchen,contact,ON,cook\n\
        2025-10-15T06:31:00,M1,,kitchen,motion,OFF,\n";

    #[test]
    fn roundtrip_is_byte_identical() {
        let d = parse_event_csv("h", VALID.as_bytes()).unwrap();
        assert_eq!(d.stream.len(), 3);
        assert_eq!(d.activity_set, vec!["cook".to_string()]);
        assert_eq!(d.sensors.len(), 2);
        assert!(d.sensors["M1"].house_item.is_none());
        assert_eq!(String::from_utf8(write_event_csv(&d)).unwrap(), VALID);
    }

    #[test]
    fn lowercase_status_is_canonicalized() {
        let text = VALID.replace(",ON,cook\n2025-10-15T06:30:05", ",on,cook\n2025-10-15T06:30:05");
        let d = parse_event_csv("h", text.as_bytes()).unwrap();
        assert_eq!(d.stream.events[0].status, Status::On);
        assert_eq!(String::from_utf8(write_event_csv(&d)).unwrap(), VALID);
    }

    #[test]
    fn short_line_names_line_number() {
        let text = format!("{VALID}2025-10-15T07:00:00,M1,,kitchen,motion\n");
        let err = parse_event_csv("h", text.as_bytes()).unwrap_err();
        assert!(matches!(err, CoreError::Parse { line: 5, .. }), "{err}");
    }

    #[test]
    fn rejects_bad_tokens_and_duplicate_header() {
        let bad_ts = VALID.replace("2025-10-15T06:31:00", "2025-13-15T06:31:00");
        assert!(matches!(parse_event_csv("h", bad_ts.as_bytes()), Err(CoreError::Parse { line: 4, .. })));
        let bad_status = VALID.replace("OFF", "MAYBE");
        assert!(matches!(parse_event_csv("h", bad_status.as_bytes()), Err(CoreError::Parse { line: 4, .. })));
        let dup = format!("{VALID}{}\n", CSV_HEADER.join(","));
        assert!(matches!(parse_event_csv("h", dup.as_bytes()), Err(CoreError::Parse { line: 5, .. })));
        assert!(parse_event_csv("h", b"a,b\n").is_err());
    }

    #[test]
    fn empty_dataset_writes_header_only() {
        let d = parse_event_csv("h", format!("{}\n", CSV_HEADER.join(",")).as_bytes()).unwrap();
        assert!(d.stream.is_empty());
        assert_eq!(write_event_csv(&d), b"timestamp,sensor_id,house_item,room,sensor_type,status,activity\n");
    }

    #[test]
    fn parse_sorts_and_cleans() {
        let text = "timestamp,sensor_id,house_item,room,sensor_type,status,activity\n\
            2025-10-15T06:30:09,M1,,kitchen,motion,OFF,\n\
            2025-10-15T06:30:05,M1,,kitchen,motion,ON,\n\
            2025-10-15T06:30:01,M1,,kitchen,motion,ON,\n";
        let (d, rep) = parse_event_csv_report("h", text.as_bytes()).unwrap();
        assert_eq!(d.stream.len(), 2);
        assert_eq!(rep.removed_count, 1);
        assert_eq!(rep.reordered_count, 2);
        assert!(d.stream.alternates());
    }

    #[test]
    fn conflicting_sensor_attributes_rejected() {
        let text = VALID.replace("D1,fridge,kitchen,contact", "M1,fridge,kitchen,contact");
        assert!(matches!(parse_event_csv("h", text.as_bytes()), Err(CoreError::Parse { line: 3, .. })));
    }
}
