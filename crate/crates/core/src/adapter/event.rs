//! Platform-native sensor events and NDJSON ingestion.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::hash::{sha256_concat, Digest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Temperature,
    Humidity,
    WindSpeed,
    WindDirection,
    Rainfall,
    SoilMoisture,
    Gps,
    BoxPresence,
    MeterPower,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::Temperature,
        Metric::Humidity,
        Metric::WindSpeed,
        Metric::WindDirection,
        Metric::Rainfall,
        Metric::SoilMoisture,
        Metric::Gps,
        Metric::BoxPresence,
        Metric::MeterPower,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Temperature => "temperature",
            Metric::Humidity => "humidity",
            Metric::WindSpeed => "wind_speed",
            Metric::WindDirection => "wind_direction",
            Metric::Rainfall => "rainfall",
            Metric::SoilMoisture => "soil_moisture",
            Metric::Gps => "gps",
            Metric::BoxPresence => "box_presence",
            Metric::MeterPower => "meter_power",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// The only unit accepted for this metric. Scalars are fixed-point ×1000.
    pub fn unit(&self) -> &'static str {
        match self {
            Metric::Temperature => "c_x1000",
            Metric::Humidity | Metric::SoilMoisture => "pct_x1000",
            Metric::WindSpeed => "mps_x1000",
            Metric::WindDirection => "deg_x1000",
            Metric::Rainfall => "mm_x1000",
            Metric::Gps => "microdeg",
            Metric::BoxPresence => "bool_x1000",
            Metric::MeterPower => "wh_x1000",
        }
    }

    pub fn is_position(&self) -> bool {
        matches!(self, Metric::Gps)
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventValue {
    Scalar(i64),
    Position { lat: i64, lon: i64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorEvent {
    pub platform: String,
    pub device: String,
    pub metric: Metric,
    pub value: EventValue,
    pub unit: String,
    pub ts: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lot: Option<String>,
}

impl SensorEvent {
    pub fn scalar(platform: &str, device: &str, metric: Metric, value: i64, ts: u64) -> Self {
        Self {
            platform: platform.to_string(),
            device: device.to_string(),
            metric,
            value: EventValue::Scalar(value),
            unit: metric.unit().to_string(),
            ts,
            lot: None,
        }
    }

    pub fn position(platform: &str, device: &str, lat: i64, lon: i64, ts: u64) -> Self {
        Self {
            value: EventValue::Position { lat, lon },
            ..Self::scalar(platform, device, Metric::Gps, 0, ts)
        }
    }

    pub fn with_lot(mut self, lot: &str) -> Self {
        self.lot = Some(lot.to_string());
        self
    }

    /// hash(platform, device, metric, ts)
    pub fn idempotency_key(&self) -> Digest {
        sha256_concat(&[
            &(self.platform.len() as u32).to_be_bytes(),
            self.platform.as_bytes(),
            &(self.device.len() as u32).to_be_bytes(),
            self.device.as_bytes(),
            self.metric.as_str().as_bytes(),
            &self.ts.to_be_bytes(),
        ])
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RejectReason {
    ParseError,
    UnknownMetric,
    BadUnit,
    BadValue,
    DuplicateEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    /// 1-based line number within the stream.
    pub line: usize,
    pub reason: RejectReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestResult {
    pub accepted: Vec<SensorEvent>,
    pub rejected: Vec<Rejection>,
}

/// Loose first pass so an unknown metric is reported as such, not as a parse
/// failure.
#[derive(Deserialize)]
struct RawEvent {
    platform: String,
    device: String,
    metric: String,
    value: serde_json::Value,
    unit: String,
    ts: u64,
    #[serde(default)]
    lot: Option<String>,
}

fn parse_line(line: &str) -> Result<SensorEvent, (RejectReason, String)> {
    let raw: RawEvent =
        serde_json::from_str(line).map_err(|e| (RejectReason::ParseError, e.to_string()))?;
    let metric =
        Metric::parse(&raw.metric).ok_or((RejectReason::UnknownMetric, raw.metric.clone()))?;
    if raw.unit != metric.unit() {
        return Err((
            RejectReason::BadUnit,
            format!("{} expects {}, got {}", metric, metric.unit(), raw.unit),
        ));
    }
    let value: EventValue =
        serde_json::from_value(raw.value).map_err(|e| (RejectReason::BadValue, e.to_string()))?;
    if metric.is_position() != matches!(value, EventValue::Position { .. }) {
        return Err((
            RejectReason::BadValue,
            format!("{metric} value has the wrong shape"),
        ));
    }
    Ok(SensorEvent {
        platform: raw.platform,
        device: raw.device,
        metric,
        value,
        unit: raw.unit,
        ts: raw.ts,
        lot: raw.lot,
    })
}

/// Stateful NDJSON reader that remembers idempotency keys across batches.
#[derive(Debug, Default, Clone)]
pub struct Ingestor {
    seen: HashSet<Digest>,
}

impl Ingestor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn seen(&self) -> usize {
        self.seen.len()
    }

    /// Parses every line. Blank lines are skipped; bad lines are rejected
    /// with a reason and never stop the stream.
    pub fn ingest(&mut self, stream: &str) -> IngestResult {
        let mut out = IngestResult::default();
        for (i, line) in stream.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match parse_line(line) {
                Err((reason, detail)) => out.rejected.push(Rejection {
                    line: i + 1,
                    reason,
                    detail,
                }),
                Ok(ev) => {
                    let key = ev.idempotency_key();
                    if self.seen.insert(key) {
                        out.accepted.push(ev);
                    } else {
                        out.rejected.push(Rejection {
                            line: i + 1,
                            reason: RejectReason::DuplicateEvent,
                            detail: key.to_hex(),
                        });
                    }
                }
            }
        }
        out
    }
}

pub fn ingest_events(stream: &str) -> IngestResult {
    Ingestor::new().ingest(stream)
}
