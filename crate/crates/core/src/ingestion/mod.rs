//! Datasets, the canonical event CSV, synthetic homes and oversampling.

mod csv_format;
pub mod sampling;
pub mod synth;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{data_err, Result};
use crate::event::{EventStream, Sensor};

pub use csv_format::{parse_event_csv, parse_event_csv_report, write_event_csv, CSV_HEADER};
pub use sampling::{build_sampling_plan, Draw, SamplingPlan};
pub use synth::{generate_synthetic_corpus, preset, SyntheticHomeSpec, PRESET_NAMES};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub sensors: BTreeMap<String, Arc<Sensor>>,
    pub stream: EventStream,
    /// Sorted, unique.
    pub activity_set: Vec<String>,
    /// Seconds added to UTC when deriving calendar features.
    pub utc_offset: i32,
}

impl Dataset {
    /// Builds the registry and activity set from the events themselves.
    pub fn from_stream(name: &str, stream: EventStream) -> Result<Self> {
        stream.check_sorted()?;
        let mut sensors: BTreeMap<String, Arc<Sensor>> = BTreeMap::new();
        let mut activities = std::collections::BTreeSet::new();
        for e in &stream.events {
            match sensors.get(&e.sensor.id) {
                Some(s) if **s != *e.sensor => {
                    return Err(data_err(format!("sensor {} appears with conflicting attributes", e.sensor.id)))
                }
                Some(_) => {}
                None => {
                    sensors.insert(e.sensor.id.clone(), e.sensor.clone());
                }
            }
            if let Some(a) = &e.activity {
                activities.insert(a.to_string());
            }
        }
        Ok(Self {
            name: name.to_string(),
            sensors,
            stream,
            activity_set: activities.into_iter().collect(),
            utc_offset: 0,
        })
    }

    /// Registry and label invariants.
    pub fn validate(&self) -> Result<()> {
        self.stream.check_sorted()?;
        for e in &self.stream.events {
            if !self.sensors.contains_key(&e.sensor.id) {
                return Err(data_err(format!("event sensor {} missing from registry", e.sensor.id)));
            }
            if let Some(a) = &e.activity {
                if self.activity_set.binary_search_by(|x| x.as_str().cmp(a)).is_err() {
                    return Err(data_err(format!("label {a} not in activity set")));
                }
            }
        }
        Ok(())
    }
}
