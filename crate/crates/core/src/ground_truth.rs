//! Attendance labels from notification posts and app opens.
//!
//! A post is labeled 1 when the originating app is opened within the
//! window after it, and 0 when it is removed or the window elapses without
//! an open. Posts whose window runs past the end of the stream without
//! either outcome are left unlabeled.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::event_model::{SensorEvent, MS_PER_MINUTE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSpec {
    pub window_minutes: f64,
    pub excluded_categories: BTreeSet<String>,
    pub notification_sensor: String,
    pub action_field: String,
    pub post_action: String,
    pub removal_action: String,
    pub app_sensor: String,
}

impl Default for LabelSpec {
    fn default() -> Self {
        Self {
            window_minutes: 10.0,
            excluded_categories: ["system", "keyboard"].iter().map(|s| s.to_string()).collect(),
            notification_sensor: "notification".into(),
            action_field: "action".into(),
            post_action: "post".into(),
            removal_action: "removal".into(),
            app_sensor: "app".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Opened,
    Removed,
    Ignored,
    Excluded,
    Unresolved,
}

impl Resolution {
    pub fn as_str(&self) -> &'static str {
        match self {
            Resolution::Opened => "opened",
            Resolution::Removed => "removed",
            Resolution::Ignored => "ignored",
            Resolution::Excluded => "excluded",
            Resolution::Unresolved => "unresolved",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEvent {
    /// Position of the notification-post event in the user's stream.
    pub anchor: usize,
    pub timestamp_ms: i64,
    pub label: u8,
    pub package: String,
    pub app_category: String,
    pub resolution: Resolution,
}

/// One line of the audit file; every notification post appears once.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub user_id: String,
    pub timestamp_ms: i64,
    pub package: String,
    pub category: String,
    pub label: Option<u8>,
    pub resolution: Resolution,
}

impl AuditEntry {
    pub fn to_line(&self) -> String {
        let label = self.label.map_or("-".to_string(), |l| l.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.user_id,
            self.timestamp_ms,
            self.package,
            self.category,
            label,
            self.resolution.as_str()
        )
    }
}

pub const AUDIT_HEADER: &str = "user_id\ttimestamp_ms\tpackage\tcategory\tlabel\tresolution";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelReport {
    pub posts: usize,
    pub labeled: usize,
    pub positives: usize,
    pub excluded: usize,
    pub unresolved: usize,
}

impl LabelReport {
    pub fn merge(&mut self, other: &LabelReport) {
        self.posts += other.posts;
        self.labeled += other.labeled;
        self.positives += other.positives;
        self.excluded += other.excluded;
        self.unresolved += other.unresolved;
    }
}

#[derive(Debug, Clone, Default)]
pub struct Labeling {
    pub labels: Vec<LabeledEvent>,
    pub audit: Vec<AuditEntry>,
    pub report: LabelReport,
}

fn is_action(ev: &SensorEvent, spec: &LabelSpec, action: &str) -> bool {
    ev.sensor == spec.notification_sensor && ev.category_value(&spec.action_field) == Some(action)
}

fn package_of(ev: &SensorEvent) -> Option<&str> {
    ev.meta.as_ref().map(|m| m.package.as_str())
}

/// Labels every non-excluded notification post in one user's chronological
/// stream.
pub fn label_notifications(events: &[SensorEvent], spec: &LabelSpec) -> Labeling {
    let window_ms = spec.window_minutes * MS_PER_MINUTE as f64;
    let mut out = Labeling::default();
    for (i, post) in events.iter().enumerate() {
        if !is_action(post, spec, &spec.post_action) {
            continue;
        }
        out.report.posts += 1;
        let (package, category) = match &post.meta {
            Some(m) => (m.package.clone(), m.category.clone()),
            None => (String::new(), String::new()),
        };
        let mut entry = AuditEntry {
            user_id: post.user_id.clone(),
            timestamp_ms: post.timestamp_ms,
            package: package.clone(),
            category: category.clone(),
            label: None,
            resolution: Resolution::Excluded,
        };
        if post.meta.is_none() || spec.excluded_categories.contains(&category) {
            out.report.excluded += 1;
            out.audit.push(entry);
            continue;
        }

        let t0 = post.timestamp_ms;
        let mut opened = false;
        let mut removed = false;
        let mut window_elapsed = false;
        for next in &events[i + 1..] {
            let dt = (next.timestamp_ms - t0) as f64;
            if dt >= window_ms {
                window_elapsed = true;
                break;
            }
            if package_of(next) != Some(package.as_str()) {
                continue;
            }
            if next.sensor == spec.app_sensor && next.timestamp_ms > t0 {
                opened = true;
                break;
            }
            if is_action(next, spec, &spec.removal_action) {
                // keep scanning: an open inside the window still wins
                removed = true;
            }
        }
        let resolution = if opened {
            Resolution::Opened
        } else if removed {
            Resolution::Removed
        } else if window_elapsed {
            Resolution::Ignored
        } else {
            Resolution::Unresolved
        };
        entry.resolution = resolution;
        if resolution == Resolution::Unresolved {
            out.report.unresolved += 1;
            out.audit.push(entry);
            continue;
        }
        let label = u8::from(opened);
        entry.label = Some(label);
        out.report.labeled += 1;
        out.report.positives += label as usize;
        out.audit.push(entry);
        out.labels.push(LabeledEvent {
            anchor: i,
            timestamp_ms: t0,
            label,
            package,
            app_category: category,
            resolution,
        });
    }
    out
}

/// Labels every user of a validated stream.
pub fn label_all(
    users: &BTreeMap<String, Vec<SensorEvent>>,
    spec: &LabelSpec,
) -> BTreeMap<String, Labeling> {
    users
        .iter()
        .map(|(u, events)| (u.clone(), label_notifications(events, spec)))
        .collect()
}
