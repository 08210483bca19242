//! Per-user, per-label loss weights.
//!
//! With `f_c = n_c / N_u` the fraction of a user's labeled rows carrying
//! label `c`, the raw weight is
//!
//! | strategy                | raw weight `g(f_c)` |
//! |-------------------------|---------------------|
//! | binary                  | 1                   |
//! | inverse frequency       | 1 / f_c             |
//! | inverse sqrt frequency  | 1 / sqrt(f_c)       |
//! | inverse log frequency   | ln(1 + 1 / f_c)     |
//!
//! and the final weight is rescaled so the user's labeled rows average 1.
//! Unlabeled rows always keep weight 0: they still drive the recurrent
//! state but contribute nothing to the loss.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::SampleRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightStrategy {
    Binary,
    InverseFrequency,
    InverseSqrtFrequency,
    InverseLogFrequency,
}

impl WeightStrategy {
    pub const ALL: [WeightStrategy; 4] = [
        WeightStrategy::InverseFrequency,
        WeightStrategy::InverseSqrtFrequency,
        WeightStrategy::Binary,
        WeightStrategy::InverseLogFrequency,
    ];

    pub fn raw(&self, fraction: f64) -> f64 {
        match self {
            WeightStrategy::Binary => 1.0,
            WeightStrategy::InverseFrequency => 1.0 / fraction,
            WeightStrategy::InverseSqrtFrequency => 1.0 / fraction.sqrt(),
            WeightStrategy::InverseLogFrequency => (1.0 + 1.0 / fraction).ln(),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            WeightStrategy::Binary => "binary",
            WeightStrategy::InverseFrequency => "inverse_frequency",
            WeightStrategy::InverseSqrtFrequency => "inverse_sqrt_frequency",
            WeightStrategy::InverseLogFrequency => "inverse_log_frequency",
        }
    }

    pub fn display_name(&self) -> &'static str {
        match self {
            WeightStrategy::Binary => "No weights (binary)",
            WeightStrategy::InverseFrequency => "Frequency",
            WeightStrategy::InverseSqrtFrequency => "Square root of frequency",
            WeightStrategy::InverseLogFrequency => "Logarithm of frequency",
        }
    }
}

impl fmt::Display for WeightStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|w| w.as_str() == s)
            .ok_or_else(|| format!("unknown weight strategy `{s}`"))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WeightError {
    #[error("no weight for user {user} label {label}")]
    MissingTableEntry { user: String, label: u8 },
    #[error("weight table parse error: {0}")]
    Parse(String),
}

/// Weight per (user, label). Users without labeled rows have no entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightTable {
    pub weights: BTreeMap<(String, u8), f64>,
}

impl WeightTable {
    pub fn get(&self, user: &str, label: u8) -> Option<f64> {
        self.weights.get(&(user.to_string(), label)).copied()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("user_id\tlabel\tweight\n");
        for ((u, l), w) in &self.weights {
            s.push_str(&format!("{u}\t{l}\t{w:?}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, WeightError> {
        let mut weights = BTreeMap::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let bad = || WeightError::Parse(format!("line {}: `{line}`", i + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            let label: u8 = parts[1].parse().map_err(|_| bad())?;
            let w: f64 = parts[2].parse().map_err(|_| bad())?;
            weights.insert((parts[0].to_string(), label), w);
        }
        Ok(Self { weights })
    }
}

/// Counts labels per user and derives the table for `strategy`.
pub fn compute_weights<'a, I>(users: I, strategy: WeightStrategy) -> WeightTable
where
    I: IntoIterator<Item = &'a [SampleRow]>,
{
    let mut table = WeightTable::default();
    for rows in users {
        let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
        let mut user = None;
        for r in rows {
            if let Some(y) = r.y {
                *counts.entry(y).or_default() += 1;
                user.get_or_insert_with(|| r.user_id.to_string());
            }
        }
        let Some(user) = user else { continue };
        for (label, w) in weights_from_counts(&counts, strategy) {
            table.weights.insert((user.clone(), label), w);
        }
    }
    table
}

/// Mean-1 weights from one user's label counts. A single-class user gets
/// weight 1 under every strategy.
pub fn weights_from_counts(counts: &BTreeMap<u8, usize>, strategy: WeightStrategy) -> BTreeMap<u8, f64> {
    let n: usize = counts.values().sum();
    let present: Vec<(u8, usize)> = counts.iter().filter(|(_, c)| **c > 0).map(|(l, c)| (*l, *c)).collect();
    if n == 0 {
        return BTreeMap::new();
    }
    if present.len() < 2 || strategy == WeightStrategy::Binary {
        return present.iter().map(|(l, _)| (*l, 1.0)).collect();
    }
    let nf = n as f64;
    let raw: Vec<(u8, usize, f64)> = present
        .iter()
        .map(|(l, c)| (*l, *c, strategy.raw(*c as f64 / nf)))
        .collect();
    let total: f64 = raw.iter().map(|(_, c, g)| *c as f64 * g).sum();
    raw.into_iter().map(|(l, _, g)| (l, g * nf / total)).collect()
}

/// Writes table weights onto labeled rows; unlabeled rows get 0.
pub fn apply_weights(rows: &mut [SampleRow], table: &WeightTable) -> Result<(), WeightError> {
    for r in rows.iter_mut() {
        match r.y {
            Some(y) => {
                r.w = table
                    .get(&r.user_id, y)
                    .ok_or_else(|| WeightError::MissingTableEntry {
                        user: r.user_id.to_string(),
                        label: y,
                    })?;
            }
            None => r.w = 0.0,
        }
    }
    Ok(())
}
