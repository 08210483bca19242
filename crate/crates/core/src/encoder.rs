//! Fitted normalization and the fused sample matrix.
//!
//! Every accepted event becomes one [`SampleRow`]. Column 0 is always the
//! time delta; sensor columns follow in schema order (fields sorted by
//! name, one column per category for categorical fields), then the
//! calendar context and demographics columns. Live values are rescaled
//! into `[0.05, 1]` and 0 means "no reading".

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use chrono::{DateTime, Datelike, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_model::{FieldValue, Gender, Schema, SensorEvent, UserProfile, MS_PER_MINUTE};
use crate::ground_truth::LabeledEvent;

pub const ENCODER_STATE_VERSION: u32 = 1;
pub const LIVE_FLOOR: f64 = 0.05;
pub const DELTA_COLUMN: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnSource {
    TimeDelta,
    Field { sensor: String, field: String },
    Category { sensor: String, field: String, category: String },
    DayOfWeek,
    HourOfDay,
    WorkingDay,
    Age,
    Gender { category: Gender },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    OneHot,
    TimeDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub source: ColumnSource,
    pub kind: ColumnKind,
    pub fitted_min: f64,
    pub fitted_cap: f64,
}

impl ColumnSpec {
    fn new(source: ColumnSource, kind: ColumnKind, min: f64, cap: f64) -> Self {
        let name = match &source {
            ColumnSource::TimeDelta => "time_delta".to_string(),
            ColumnSource::Field { sensor, field } => format!("{sensor}.{field}"),
            ColumnSource::Category {
                sensor,
                field,
                category,
            } => format!("{sensor}.{field}={category}"),
            ColumnSource::DayOfWeek => "ctx.day_of_week".to_string(),
            ColumnSource::HourOfDay => "ctx.hour_of_day".to_string(),
            ColumnSource::WorkingDay => "ctx.working_day".to_string(),
            ColumnSource::Age => "user.age".to_string(),
            ColumnSource::Gender { category } => format!("user.gender={}", category.as_str()),
        };
        Self {
            name,
            source,
            kind,
            fitted_min: min,
            fitted_cap: cap,
        }
    }

    pub fn encode(&self, v: f64) -> f64 {
        rescale(v, self.fitted_min, self.fitted_cap)
    }

    /// Sensor columns take part in the compression clash rule; the time
    /// delta does not.
    pub fn is_sensor(&self) -> bool {
        matches!(self.source, ColumnSource::Field { .. } | ColumnSource::Category { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSettings {
    pub cap_percentile: f64,
    pub delta_cap_minutes: f64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            cap_percentile: 0.95,
            delta_cap_minutes: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    pub version: u32,
    pub settings: EncoderSettings,
    pub columns: Vec<ColumnSpec>,
}

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("training stream is empty")]
    EmptyTraining,
    #[error("label anchor {0} does not point at an event of this user")]
    LabelAnchorMissing(usize),
    #[error("encoder state version {0} is not supported")]
    Version(u32),
    #[error("encoder state parse error: {0}")]
    Parse(String),
}

/// Numeric column with no training readings; kept with min = cap = 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmptyColumn(pub String);

/// Rescales a raw value into `[0.05, 1]`: clipped to `[min, cap]`, then
/// mapped linearly. NaN means missing and encodes as 0. A degenerate
/// column (cap <= min) encodes every live value as 0.05.
pub fn rescale(v: f64, min: f64, cap: f64) -> f64 {
    if v.is_nan() {
        return 0.0;
    }
    if cap <= min {
        return LIVE_FLOOR;
    }
    let clipped = v.clamp(min, cap);
    LIVE_FLOOR + (1.0 - LIVE_FLOOR) * (clipped - min) / (cap - min)
}

/// Gap before the current event in milliseconds, capped. The first event of
/// a user has no predecessor and gets the cap.
pub fn time_delta_ms(prev_ms: Option<i64>, cur_ms: i64, cap_minutes: f64) -> i64 {
    let cap = (cap_minutes * MS_PER_MINUTE as f64).round() as i64;
    match prev_ms {
        Some(prev) => (cur_ms - prev).clamp(0, cap),
        None => cap,
    }
}

/// Minutes form of [`time_delta_ms`].
pub fn time_delta(prev_ms: Option<i64>, cur_ms: i64, cap_minutes: f64) -> f64 {
    time_delta_ms(prev_ms, cur_ms, cap_minutes) as f64 / MS_PER_MINUTE as f64
}

/// Nearest-rank percentile of unsorted values; `None` when empty.
pub fn nearest_rank(values: &mut [f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let rank = ((p * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    Some(*v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalendarContext {
    /// ISO weekday, Monday = 1.
    pub day_of_week: u32,
    pub hour_of_day: u32,
    pub working_day: bool,
}

pub fn calendar_context(ts_ms: i64) -> CalendarContext {
    let dt = DateTime::<Utc>::from_timestamp_millis(ts_ms).unwrap_or_default();
    let day = dt.weekday().number_from_monday();
    CalendarContext {
        day_of_week: day,
        hour_of_day: dt.hour(),
        working_day: day <= 5,
    }
}

/// One sample of the fused matrix. `delta_ms` is the raw (pre-rescale) time
/// delta, kept so merged deltas stay exact.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub user_id: Arc<str>,
    pub wall_time_ms: i64,
    pub delta_ms: i64,
    pub x: Vec<f32>,
    pub y: Option<u8>,
    pub w: f64,
    pub category: Option<Arc<str>>,
}

impl SampleRow {
    pub fn padding(user_id: Arc<str>, width: usize) -> Self {
        Self {
            user_id,
            wall_time_ms: 0,
            delta_ms: 0,
            x: vec![0.0; width],
            y: None,
            w: 0.0,
            category: None,
        }
    }

    /// Real rows always carry a live time delta, so an all-zero feature
    /// vector only occurs in padding.
    pub fn is_padding(&self) -> bool {
        self.x.get(DELTA_COLUMN).is_none_or(|v| *v == 0.0) && self.y.is_none() && self.w == 0.0
    }

    pub fn is_labeled(&self) -> bool {
        self.y.is_some()
    }
}

enum FieldSlot {
    Numeric(usize),
    OneHot(HashMap<String, usize>),
}

struct ColumnIndex {
    sensors: HashMap<String, HashMap<String, FieldSlot>>,
    day: usize,
    hour: usize,
    working: usize,
    age: usize,
    gender: HashMap<Gender, usize>,
}

impl ColumnIndex {
    fn new(columns: &[ColumnSpec]) -> Self {
        let mut sensors: HashMap<String, HashMap<String, FieldSlot>> = HashMap::new();
        let (mut day, mut hour, mut working, mut age) = (0, 0, 0, 0);
        let mut gender = HashMap::new();
        for (i, c) in columns.iter().enumerate() {
            match &c.source {
                ColumnSource::TimeDelta => {}
                ColumnSource::Field { sensor, field } => {
                    sensors
                        .entry(sensor.clone())
                        .or_default()
                        .insert(field.clone(), FieldSlot::Numeric(i));
                }
                ColumnSource::Category {
                    sensor,
                    field,
                    category,
                } => {
                    let slot = sensors
                        .entry(sensor.clone())
                        .or_default()
                        .entry(field.clone())
                        .or_insert_with(|| FieldSlot::OneHot(HashMap::new()));
                    if let FieldSlot::OneHot(map) = slot {
                        map.insert(category.clone(), i);
                    }
                }
                ColumnSource::DayOfWeek => day = i,
                ColumnSource::HourOfDay => hour = i,
                ColumnSource::WorkingDay => working = i,
                ColumnSource::Age => age = i,
                ColumnSource::Gender { category } => {
                    gender.insert(*category, i);
                }
            }
        }
        Self {
            sensors,
            day,
            hour,
            working,
            age,
            gender,
        }
    }
}

pub const GENDERS: [Gender; 3] = [Gender::Female, Gender::Male, Gender::Other];

impl EncoderState {
    /// Fits per-column minimum and percentile cap on the training events.
    /// One-hot columns come from the schema, never from the data.
    pub fn fit<'a, I>(
        training: I,
        profiles: &[UserProfile],
        schema: &Schema,
        settings: EncoderSettings,
    ) -> Result<(Self, Vec<EmptyColumn>), EncodeError>
    where
        I: IntoIterator<Item = &'a SensorEvent>,
    {
        let mut observed: HashMap<(&str, &str), Vec<f64>> = HashMap::new();
        let mut n_events = 0usize;
        for ev in training {
            n_events += 1;
            for (field, value) in &ev.values {
                if let FieldValue::Number(v) = value {
                    if v.is_finite() {
                        observed
                            .entry((ev.sensor.as_str(), field.as_str()))
                            .or_default()
                            .push(*v);
                    }
                }
            }
        }
        if n_events == 0 {
            return Err(EncodeError::EmptyTraining);
        }

        let mut warnings = Vec::new();
        let mut fit_numeric = |name: String, values: Option<&mut Vec<f64>>| -> (f64, f64) {
            match values {
                Some(vals) if !vals.is_empty() => {
                    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let cap = nearest_rank(vals, settings.cap_percentile).unwrap_or(min);
                    (min, cap.max(min))
                }
                _ => {
                    warnings.push(EmptyColumn(name));
                    (0.0, 0.0)
                }
            }
        };

        let mut columns = vec![ColumnSpec::new(
            ColumnSource::TimeDelta,
            ColumnKind::TimeDelta,
            0.0,
            settings.delta_cap_minutes,
        )];
        for sensor in &schema.sensors {
            for field in sensor.sorted_fields() {
                if field.is_categorical() {
                    for cat in &field.categories {
                        columns.push(ColumnSpec::new(
                            ColumnSource::Category {
                                sensor: sensor.name.clone(),
                                field: field.name.clone(),
                                category: cat.clone(),
                            },
                            ColumnKind::OneHot,
                            0.0,
                            1.0,
                        ));
                    }
                } else {
                    let name = format!("{}.{}", sensor.name, field.name);
                    let (min, cap) = fit_numeric(
                        name,
                        observed.get_mut(&(sensor.name.as_str(), field.name.as_str())),
                    );
                    columns.push(ColumnSpec::new(
                        ColumnSource::Field {
                            sensor: sensor.name.clone(),
                            field: field.name.clone(),
                        },
                        ColumnKind::Numeric,
                        min,
                        cap,
                    ));
                }
            }
        }
        columns.push(ColumnSpec::new(ColumnSource::DayOfWeek, ColumnKind::Numeric, 1.0, 7.0));
        columns.push(ColumnSpec::new(ColumnSource::HourOfDay, ColumnKind::Numeric, 0.0, 23.0));
        columns.push(ColumnSpec::new(ColumnSource::WorkingDay, ColumnKind::Numeric, 0.0, 1.0));
        let mut ages: Vec<f64> = profiles.iter().filter_map(|p| p.age).filter(|a| a.is_finite()).collect();
        let (amin, acap) = fit_numeric("user.age".into(), Some(&mut ages));
        columns.push(ColumnSpec::new(ColumnSource::Age, ColumnKind::Numeric, amin, acap));
        for g in GENDERS {
            columns.push(ColumnSpec::new(ColumnSource::Gender { category: g }, ColumnKind::OneHot, 0.0, 1.0));
        }

        Ok((
            Self {
                version: ENCODER_STATE_VERSION,
                settings,
                columns,
            },
            warnings,
        ))
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    /// Mask of columns checked by the compression clash rule.
    pub fn sensor_mask(&self) -> Vec<bool> {
        self.columns.iter().map(ColumnSpec::is_sensor).collect()
    }

    /// Rescaled time-delta value for a raw delta in milliseconds.
    pub fn encode_delta(&self, delta_ms: i64) -> f32 {
        self.columns[DELTA_COLUMN].encode(delta_ms as f64 / MS_PER_MINUTE as f64) as f32
    }

    /// One row per event of a single user's chronological stream. Labels
    /// are placed on their anchor rows with provisional weight 1.
    pub fn encode_stream(
        &self,
        events: &[SensorEvent],
        labels: &[LabeledEvent],
        profile: Option<&UserProfile>,
    ) -> Result<Vec<SampleRow>, EncodeError> {
        let index = ColumnIndex::new(&self.columns);
        let width = self.width();
        let Some(first) = events.first() else {
            return match labels.first() {
                Some(l) => Err(EncodeError::LabelAnchorMissing(l.anchor)),
                None => Ok(Vec::new()),
            };
        };
        let user: Arc<str> = Arc::from(first.user_id.as_str());

        let mut template = vec![0f32; width];
        if let Some(p) = profile {
            if let Some(age) = p.age {
                template[index.age] = self.columns[index.age].encode(age) as f32;
            }
            if let Some(g) = p.gender {
                template[index.gender[&g]] = 1.0;
            }
        }

        let mut rows = Vec::with_capacity(events.len());
        let mut prev = None;
        for ev in events {
            let mut x = template.clone();
            let delta_ms = time_delta_ms(prev, ev.timestamp_ms, self.settings.delta_cap_minutes);
            prev = Some(ev.timestamp_ms);
            x[DELTA_COLUMN] = self.encode_delta(delta_ms);
            if let Some(fields) = index.sensors.get(&ev.sensor) {
                for (name, value) in &ev.values {
                    match (fields.get(name), value) {
                        (Some(FieldSlot::Numeric(col)), FieldValue::Number(v)) => {
                            x[*col] = self.columns[*col].encode(*v) as f32;
                        }
                        (Some(FieldSlot::OneHot(cats)), FieldValue::Category(c)) => {
                            if let Some(col) = cats.get(c) {
                                x[*col] = 1.0;
                            }
                        }
                        _ => {}
                    }
                }
            }
            let cal = calendar_context(ev.timestamp_ms);
            x[index.day] = self.columns[index.day].encode(cal.day_of_week as f64) as f32;
            x[index.hour] = self.columns[index.hour].encode(cal.hour_of_day as f64) as f32;
            x[index.working] = self.columns[index.working].encode(f64::from(u8::from(cal.working_day))) as f32;
            rows.push(SampleRow {
                user_id: user.clone(),
                wall_time_ms: ev.timestamp_ms,
                delta_ms,
                x,
                y: None,
                w: 0.0,
                category: None,
            });
        }
        for label in labels {
            let row = rows
                .get_mut(label.anchor)
                .filter(|r| r.wall_time_ms == label.timestamp_ms)
                .ok_or(EncodeError::LabelAnchorMissing(label.anchor))?;
            row.y = Some(label.label);
            row.w = 1.0;
            row.category = Some(Arc::from(label.app_category.as_str()));
        }
        Ok(rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("encoder state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EncodeError> {
        let state: EncoderState = serde_json::from_str(text).map_err(|e| EncodeError::Parse(e.to_string()))?;
        if state.version != ENCODER_STATE_VERSION {
            return Err(EncodeError::Version(state.version));
        }
        Ok(state)
    }

    pub fn columns_by_name(&self) -> BTreeMap<&str, usize> {
        self.columns.iter().enumerate().map(|(i, c)| (c.name.as_str(), i)).collect()
    }
}
