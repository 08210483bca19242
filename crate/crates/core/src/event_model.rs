//! Sensor schema, raw event records, validation and the chronological
//! train / valid / test split.
//!
//! Input is line-delimited JSON, one event per line:
//!
//! ```text
//! {"user_id":"u03","timestamp_ms":1465171200000,"sensor":"ringer","values":{"mode":"silent"}}
//! {"user_id":"u03","timestamp_ms":1465171260000,"sensor":"notification",
//!  "values":{"action":"post","category":"messaging"},
//!  "meta":{"package":"com.whatsapp","category":"messaging"}}
//! ```
//!
//! Blank lines and lines starting with `#` are skipped and do not count as
//! records.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MS_PER_MINUTE: i64 = 60_000;
pub const MS_PER_DAY: i64 = 24 * 60 * MS_PER_MINUTE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorMode {
    Periodical,
    EventDriven,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Numeric,
    Categorical,
    Mixed,
}

/// One named value carried by a sensor. An empty category list means the
/// field is numeric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl FieldSpec {
    pub fn numeric(name: &str) -> Self {
        Self {
            name: name.to_string(),
            categories: Vec::new(),
        }
    }

    pub fn categorical(name: &str, categories: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            categories: categories.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn is_categorical(&self) -> bool {
        !self.categories.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorKind {
    pub name: String,
    pub mode: SensorMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_minutes: Option<f64>,
    pub fields: Vec<FieldSpec>,
    /// Events of this sensor must carry `meta.package` / `meta.category`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub app_meta: bool,
}

impl SensorKind {
    pub fn value_kind(&self) -> ValueKind {
        let cats = self.fields.iter().filter(|f| f.is_categorical()).count();
        if cats == 0 {
            ValueKind::Numeric
        } else if cats == self.fields.len() {
            ValueKind::Categorical
        } else {
            ValueKind::Mixed
        }
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Fields in lexicographic name order, the order columns are laid out in.
    pub fn sorted_fields(&self) -> Vec<&FieldSpec> {
        let mut fields: Vec<&FieldSpec> = self.fields.iter().collect();
        fields.sort_by(|a, b| a.name.cmp(&b.name));
        fields
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("duplicate sensor name `{0}`")]
    DuplicateSensor(String),
    #[error("sensor `{0}` declares no fields")]
    NoFields(String),
    #[error("sensor `{sensor}` field `{field}` is declared twice")]
    DuplicateField { sensor: String, field: String },
    #[error("sensor `{sensor}` field `{field}` needs at least 2 categories")]
    TooFewCategories { sensor: String, field: String },
    #[error("periodical sensor `{0}` needs period_minutes > 0")]
    BadPeriod(String),
    #[error("schema parse error: {0}")]
    Parse(String),
}

/// Ordered list of sensor kinds. Registration order fixes column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(rename = "sensor")]
    pub sensors: Vec<SensorKind>,
}

pub const APP_CATEGORIES: [&str; 6] = ["messaging", "email", "social", "other", "system", "keyboard"];

impl Schema {
    pub fn new(sensors: Vec<SensorKind>) -> Result<Self, SchemaError> {
        let schema = Self { sensors };
        schema.check()?;
        Ok(schema)
    }

    pub fn check(&self) -> Result<(), SchemaError> {
        let mut names = BTreeSet::new();
        for s in &self.sensors {
            if !names.insert(s.name.as_str()) {
                return Err(SchemaError::DuplicateSensor(s.name.clone()));
            }
            if s.fields.is_empty() {
                return Err(SchemaError::NoFields(s.name.clone()));
            }
            let mut fields = BTreeSet::new();
            for f in &s.fields {
                if !fields.insert(f.name.as_str()) {
                    return Err(SchemaError::DuplicateField {
                        sensor: s.name.clone(),
                        field: f.name.clone(),
                    });
                }
                if f.categories.len() == 1 {
                    return Err(SchemaError::TooFewCategories {
                        sensor: s.name.clone(),
                        field: f.name.clone(),
                    });
                }
            }
            match (s.mode, s.period_minutes) {
                (SensorMode::Periodical, Some(p)) if p > 0.0 && p.is_finite() => {}
                (SensorMode::Periodical, _) => return Err(SchemaError::BadPeriod(s.name.clone())),
                (SensorMode::EventDriven, _) => {}
            }
        }
        Ok(())
    }

    pub fn sensor(&self, name: &str) -> Option<&SensorKind> {
        self.sensors.iter().find(|s| s.name == name)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SchemaError> {
        let schema: Schema = toml::from_str(text).map_err(|e| SchemaError::Parse(e.to_string()))?;
        schema.check()?;
        Ok(schema)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    /// The periodical and event-driven sensors of a typical smartphone
    /// logging study, sampled every 10 minutes where periodical.
    pub fn default_phone() -> Self {
        use SensorMode::*;
        let periodical = |name: &str, fields: Vec<FieldSpec>| SensorKind {
            name: name.to_string(),
            mode: Periodical,
            period_minutes: Some(10.0),
            fields,
            app_meta: false,
        };
        let event = |name: &str, fields: Vec<FieldSpec>| SensorKind {
            name: name.to_string(),
            mode: EventDriven,
            period_minutes: None,
            fields,
            app_meta: false,
        };
        let mut app = event("app", vec![FieldSpec::categorical("category", &APP_CATEGORIES)]);
        app.app_meta = true;
        let mut notification = event(
            "notification",
            vec![
                FieldSpec::categorical("action", &["post", "removal"]),
                FieldSpec::categorical("category", &APP_CATEGORIES),
            ],
        );
        notification.app_meta = true;
        let sensors = vec![
            periodical(
                "accelerometer",
                vec![FieldSpec::numeric("mean"), FieldSpec::numeric("max")],
            ),
            periodical("battery", vec![FieldSpec::numeric("drain")]),
            periodical(
                "data",
                vec![
                    FieldSpec::numeric("total_rx"),
                    FieldSpec::numeric("total_tx"),
                    FieldSpec::numeric("cell_rx"),
                    FieldSpec::numeric("cell_tx"),
                ],
            ),
            periodical("light", vec![FieldSpec::numeric("lux")]),
            periodical("noise", vec![FieldSpec::numeric("db")]),
            periodical(
                "semantic_location",
                vec![FieldSpec::categorical(
                    "place",
                    &["home", "work", "single", "repeated", "passing", "unknown"],
                )],
            ),
            app,
            event("audio_music", vec![FieldSpec::categorical("state", &["music", "no_music"])]),
            event(
                "audio_source",
                vec![FieldSpec::categorical("output", &["speaker", "headphones"])],
            ),
            event(
                "charging",
                vec![FieldSpec::categorical("state", &["charging", "not_charging"])],
            ),
            notification,
            event(
                "notification_center",
                vec![FieldSpec::categorical("access", &["opened", "closed"])],
            ),
            event(
                "ringer",
                vec![FieldSpec::categorical("mode", &["normal", "silent", "vibrate"])],
            ),
            event(
                "screen",
                vec![FieldSpec::categorical("state", &["on", "off", "unlocked"])],
            ),
            event(
                "screen_orientation",
                vec![FieldSpec::categorical("orientation", &["portrait", "landscape"])],
            ),
        ];
        Self::new(sensors).expect("default schema is valid")
    }
}

impl Default for Schema {
    fn default() -> Self {
        Self::default_phone()
    }
}

/// A field reading. `null` in the input means the sensor reported the field
/// but had no value (NaN), which encodes as missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Number(f64),
    Category(String),
    Missing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventMeta {
    pub package: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorEvent {
    pub user_id: String,
    pub timestamp_ms: i64,
    pub sensor: String,
    pub values: BTreeMap<String, FieldValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<EventMeta>,
}

impl SensorEvent {
    pub fn category_value(&self, field: &str) -> Option<&str> {
        match self.values.get(field) {
            Some(FieldValue::Category(c)) => Some(c.as_str()),
            _ => None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("record {index}: {reason}")]
pub struct SchemaViolation {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Female,
    Male,
    Other,
}

impl Gender {
    pub fn as_str(&self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
            Gender::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub age: Option<f64>,
    pub gender: Option<Gender>,
}

impl UserProfile {
    pub fn check(&self) -> Result<(), String> {
        match self.age {
            Some(a) if !(10.0..=120.0).contains(&a) => {
                Err(format!("user {}: age {a} outside [10, 120]", self.user_id))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub total: usize,
    pub accepted: usize,
    pub rejected: Vec<SchemaViolation>,
    /// Events that arrived earlier in the input than a later-stamped event
    /// of the same user.
    pub out_of_order: usize,
}

/// Accepted events grouped per user, each list in chronological order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidatedStream {
    pub users: BTreeMap<String, Vec<SensorEvent>>,
    pub report: ValidationReport,
}

impl ValidatedStream {
    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn event_count(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    /// All events, users in id order, each user chronological.
    pub fn events(&self) -> impl Iterator<Item = &SensorEvent> {
        self.users.values().flatten()
    }
}

fn check_event(ev: &SensorEvent, schema: &Schema) -> Result<(), String> {
    if ev.user_id.is_empty() {
        return Err("empty user_id".into());
    }
    if ev.timestamp_ms < 0 {
        return Err(format!("negative timestamp {}", ev.timestamp_ms));
    }
    let Some(kind) = schema.sensor(&ev.sensor) else {
        return Err(format!("unknown sensor `{}`", ev.sensor));
    };
    if ev.values.is_empty() {
        return Err("no values".into());
    }
    for (name, value) in &ev.values {
        let Some(field) = kind.field(name) else {
            return Err(format!("sensor `{}` has no field `{name}`", kind.name));
        };
        match (field.is_categorical(), value) {
            (_, FieldValue::Missing) => {}
            (false, FieldValue::Number(_)) => {}
            (true, FieldValue::Category(c)) => {
                if !field.categories.iter().any(|k| k == c) {
                    return Err(format!("`{}.{name}`: unknown category `{c}`", kind.name));
                }
            }
            (false, FieldValue::Category(c)) => {
                return Err(format!("`{}.{name}` is numeric, got `{c}`", kind.name));
            }
            (true, FieldValue::Number(v)) => {
                return Err(format!("`{}.{name}` is categorical, got {v}", kind.name));
            }
        }
    }
    if kind.app_meta && ev.meta.is_none() {
        return Err(format!("`{}` event without meta.package", kind.name));
    }
    Ok(())
}

/// Validates records that may already have failed to parse. Indices in the
/// report are the positions in `records`.
pub fn validate_records<I>(records: I, schema: &Schema) -> ValidatedStream
where
    I: IntoIterator<Item = Result<SensorEvent, String>>,
{
    let mut report = ValidationReport::default();
    let mut users: BTreeMap<String, Vec<SensorEvent>> = BTreeMap::new();
    let mut last_seen: BTreeMap<String, i64> = BTreeMap::new();
    for (index, record) in records.into_iter().enumerate() {
        report.total += 1;
        let checked = record.and_then(|ev| check_event(&ev, schema).map(|_| ev));
        match checked {
            Ok(ev) => {
                let last = last_seen.entry(ev.user_id.clone()).or_insert(i64::MIN);
                if ev.timestamp_ms < *last {
                    report.out_of_order += 1;
                } else {
                    *last = ev.timestamp_ms;
                }
                report.accepted += 1;
                users.entry(ev.user_id.clone()).or_default().push(ev);
            }
            Err(reason) => report.rejected.push(SchemaViolation { index, reason }),
        }
    }
    for events in users.values_mut() {
        // stable: equal (timestamp, sensor) keep input order
        events.sort_by(|a, b| {
            a.timestamp_ms
                .cmp(&b.timestamp_ms)
                .then_with(|| a.sensor.cmp(&b.sensor))
        });
    }
    ValidatedStream { users, report }
}

pub fn validate_stream(events: Vec<SensorEvent>, schema: &Schema) -> ValidatedStream {
    validate_records(events.into_iter().map(Ok), schema)
}

/// Like [`validate_stream`] but fails on the first rejected record.
pub fn validate_stream_strict(
    events: Vec<SensorEvent>,
    schema: &Schema,
) -> Result<ValidatedStream, SchemaViolation> {
    let stream = validate_stream(events, schema);
    match stream.report.rejected.first() {
        Some(v) => Err(v.clone()),
        None => Ok(stream),
    }
}

/// Parses a line-delimited event log. Malformed lines become `Err` records
/// so their position is kept.
pub fn parse_event_lines<R: BufRead>(reader: R) -> std::io::Result<Vec<Result<SensorEvent, String>>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(serde_json::from_str::<SensorEvent>(trimmed).map_err(|e| format!("malformed record: {e}")));
    }
    Ok(out)
}

pub fn read_and_validate<R: BufRead>(reader: R, schema: &Schema) -> std::io::Result<ValidatedStream> {
    Ok(validate_records(parse_event_lines(reader)?, schema))
}

/// Chronological split lengths, in whole days from each user's first day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_days: u32,
    pub valid_days: u32,
    pub test_days: u32,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_days: 14,
            valid_days: 7,
            test_days: 7,
        }
    }
}

impl SplitSpec {
    pub fn total_days(&self) -> u32 {
        self.train_days + self.valid_days + self.test_days
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Train,
    Valid,
    KnownTest,
    UnknownTest,
}

impl Segment {
    pub const ALL: [Segment; 4] = [
        Segment::Train,
        Segment::Valid,
        Segment::KnownTest,
        Segment::UnknownTest,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Segment::Train => "train",
            Segment::Valid => "valid",
            Segment::KnownTest => "known_test",
            Segment::UnknownTest => "unknown_test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|seg| seg.as_str() == s)
    }
}

/// One user's time range inside a split. Rows before `score_from_ms` are
/// only used to warm up recurrent state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub user_id: String,
    pub start_ms: i64,
    /// Exclusive; `i64::MAX` for the open-ended final range.
    pub end_ms: i64,
    pub score_from_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserPlan {
    pub start_ms: i64,
    pub train_end_ms: i64,
    pub valid_end_ms: i64,
    pub unknown: bool,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("user {user}: span of {span_days:.2} days is shorter than the required {required_days}")]
pub struct InsufficientSpan {
    pub user: String,
    pub span_days: f64,
    pub required_days: u32,
}

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("unknown-user fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("split needs at least one day")]
    EmptySpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub users: BTreeMap<String, UserPlan>,
    pub dropped: Vec<InsufficientSpan>,
}

impl DatasetSplit {
    pub fn segment_of(&self, user: &str, ts: i64) -> Option<Segment> {
        let plan = self.users.get(user)?;
        if plan.unknown {
            return Some(Segment::UnknownTest);
        }
        Some(if ts < plan.train_end_ms {
            Segment::Train
        } else if ts < plan.valid_end_ms {
            Segment::Valid
        } else {
            Segment::KnownTest
        })
    }

    /// Whether a row at `ts` is scored within its segment.
    pub fn is_scored(&self, user: &str, ts: i64) -> bool {
        match self.users.get(user) {
            Some(plan) if plan.unknown => ts >= plan.valid_end_ms,
            Some(_) => true,
            None => false,
        }
    }

    pub fn selections(&self, segment: Segment) -> Vec<Selection> {
        self.users
            .iter()
            .filter_map(|(user, p)| {
                let (start, end, score_from) = match (segment, p.unknown) {
                    (Segment::Train, false) => (p.start_ms, p.train_end_ms, p.start_ms),
                    (Segment::Valid, false) => (p.train_end_ms, p.valid_end_ms, p.train_end_ms),
                    (Segment::KnownTest, false) => (p.valid_end_ms, i64::MAX, p.valid_end_ms),
                    (Segment::UnknownTest, true) => (p.start_ms, i64::MAX, p.valid_end_ms),
                    _ => return None,
                };
                Some(Selection {
                    user_id: user.clone(),
                    start_ms: start,
                    end_ms: end,
                    score_from_ms: score_from,
                })
            })
            .collect()
    }

    pub fn users_in(&self, segment: Segment) -> BTreeSet<String> {
        self.selections(segment).into_iter().map(|s| s.user_id).collect()
    }

    pub fn known_users(&self) -> Vec<&str> {
        self.users
            .iter()
            .filter(|(_, p)| !p.unknown)
            .map(|(u, _)| u.as_str())
            .collect()
    }

    pub fn unknown_users(&self) -> Vec<&str> {
        self.users
            .iter()
            .filter(|(_, p)| p.unknown)
            .map(|(u, _)| u.as_str())
            .collect()
    }
}

fn day_floor(ts: i64) -> i64 {
    ts.div_euclid(MS_PER_DAY) * MS_PER_DAY
}

/// Splits every user chronologically into train / valid / known-test ranges
/// and moves a seeded random `unknown_fraction` of users wholesale into the
/// unknown test split, scored only over the final test range.
///
/// A user is retained when it has at least one event on the last day of the
/// requested span; others are dropped and listed in `dropped`.
pub fn split_dataset(
    stream: &ValidatedStream,
    spec: SplitSpec,
    unknown_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, SplitError> {
    if !(0.0..=1.0).contains(&unknown_fraction) {
        return Err(SplitError::InvalidFraction(unknown_fraction));
    }
    let total = spec.total_days();
    if total == 0 {
        return Err(SplitError::EmptySpec);
    }
    let mut split = DatasetSplit::default();
    for (user, events) in &stream.users {
        let (Some(first), Some(last)) = (events.first(), events.last()) else {
            continue;
        };
        let start = day_floor(first.timestamp_ms);
        let last_day_start = start + (total as i64 - 1) * MS_PER_DAY;
        if last.timestamp_ms < last_day_start {
            split.dropped.push(InsufficientSpan {
                user: user.clone(),
                span_days: (last.timestamp_ms - start) as f64 / MS_PER_DAY as f64,
                required_days: total,
            });
            continue;
        }
        let train_end = start + spec.train_days as i64 * MS_PER_DAY;
        split.users.insert(
            user.clone(),
            UserPlan {
                start_ms: start,
                train_end_ms: train_end,
                valid_end_ms: train_end + spec.valid_days as i64 * MS_PER_DAY,
                unknown: false,
            },
        );
    }
    let n_unknown = (split.users.len() as f64 * unknown_fraction).round() as usize;
    let mut ids: Vec<String> = split.users.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    for id in ids.into_iter().take(n_unknown) {
        if let Some(plan) = split.users.get_mut(&id) {
            plan.unknown = true;
        }
    }
    Ok(split)
}
