//! Lossless time-based compression of a user's sample rows.
//!
//! Consecutive rows are folded together while they carry no conflicting
//! readings. A row that already holds a ground-truth label never absorbs
//! a successor, so every label keeps its own row.

use serde::{Deserialize, Serialize};

use crate::encoder::{rescale, SampleRow, DELTA_COLUMN};
use crate::event_model::MS_PER_MINUTE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    /// Upper bound on the merged time span; `None` merges without limit.
    pub threshold_minutes: Option<f64>,
    /// Cap used when rescaling the merged time delta.
    pub delta_cap_minutes: f64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            threshold_minutes: None,
            delta_cap_minutes: 60.0,
        }
    }
}

impl CompressionConfig {
    pub fn threshold_ms(&self) -> Option<i64> {
        self.threshold_minutes
            .map(|t| (t * MS_PER_MINUTE as f64).round() as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Blocked {
    GroundTruth,
    Clash,
    Threshold,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompressionReport {
    pub rows_in: usize,
    pub rows_out: usize,
    pub blocked_clash: usize,
    pub blocked_ground_truth: usize,
    pub blocked_threshold: usize,
}

impl CompressionReport {
    pub fn ratio(&self) -> f64 {
        if self.rows_in == 0 {
            0.0
        } else {
            1.0 - self.rows_out as f64 / self.rows_in as f64
        }
    }

    pub fn merge(&mut self, other: &CompressionReport) {
        self.rows_in += other.rows_in;
        self.rows_out += other.rows_out;
        self.blocked_clash += other.blocked_clash;
        self.blocked_ground_truth += other.blocked_ground_truth;
        self.blocked_threshold += other.blocked_threshold;
    }

    pub fn to_text(&self) -> String {
        format!(
            "rows_in={}\nrows_out={}\nratio={:.6}\nblocked_clash={}\nblocked_ground_truth={}\nblocked_threshold={}\n",
            self.rows_in,
            self.rows_out,
            self.ratio(),
            self.blocked_clash,
            self.blocked_ground_truth,
            self.blocked_threshold
        )
    }
}

/// Why `next` cannot be folded into `acc`, checking ground truth, then
/// value clashes, then the span threshold.
pub fn merge_check(acc: &SampleRow, next: &SampleRow, config: &CompressionConfig) -> Result<(), Blocked> {
    if acc.w != 0.0 || acc.y.is_some() {
        return Err(Blocked::GroundTruth);
    }
    let clash = acc
        .x
        .iter()
        .zip(&next.x)
        .enumerate()
        .any(|(j, (a, b))| j != DELTA_COLUMN && *a != 0.0 && *b != 0.0 && a != b);
    if clash {
        return Err(Blocked::Clash);
    }
    if let Some(t) = config.threshold_ms() {
        if acc.delta_ms + next.delta_ms > t {
            return Err(Blocked::Threshold);
        }
    }
    Ok(())
}

pub fn mergeable(acc: &SampleRow, next: &SampleRow, config: &CompressionConfig) -> bool {
    merge_check(acc, next, config).is_ok()
}

/// Folds `next` into `acc`: empty columns take the successor's value, the
/// deltas add up, and a labeled successor hands over its label.
pub fn fold_into(acc: &mut SampleRow, next: &SampleRow, config: &CompressionConfig) {
    for (j, (a, b)) in acc.x.iter_mut().zip(&next.x).enumerate() {
        if j != DELTA_COLUMN && *a == 0.0 {
            *a = *b;
        }
    }
    acc.delta_ms += next.delta_ms;
    acc.x[DELTA_COLUMN] = rescale(
        acc.delta_ms as f64 / MS_PER_MINUTE as f64,
        0.0,
        config.delta_cap_minutes,
    ) as f32;
    acc.wall_time_ms = next.wall_time_ms;
    if next.y.is_some() || next.w != 0.0 {
        acc.y = next.y;
        acc.w = next.w;
        acc.category = next.category.clone();
    }
}

/// Greedy left-to-right compression of one user's chronological rows.
pub fn compress_stream(rows: &[SampleRow], config: &CompressionConfig) -> (Vec<SampleRow>, CompressionReport) {
    let mut report = CompressionReport {
        rows_in: rows.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    let mut iter = rows.iter();
    let Some(first) = iter.next() else {
        return (out, report);
    };
    let mut acc = first.clone();
    for next in iter {
        match merge_check(&acc, next, config) {
            Ok(()) => fold_into(&mut acc, next, config),
            Err(reason) => {
                match reason {
                    Blocked::GroundTruth => report.blocked_ground_truth += 1,
                    Blocked::Clash => report.blocked_clash += 1,
                    Blocked::Threshold => report.blocked_threshold += 1,
                }
                out.push(std::mem::replace(&mut acc, next.clone()));
            }
        }
    }
    out.push(acc);
    report.rows_out = out.len();
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    const M: i64 = MS_PER_MINUTE;

    fn row(delta_min: i64, vals: &[f32], y: Option<u8>) -> SampleRow {
        let mut x = vec![rescale(delta_min as f64, 0.0, 60.0) as f32];
        x.extend_from_slice(vals);
        SampleRow {
            user_id: Arc::from("u"),
            wall_time_ms: 0,
            delta_ms: delta_min * M,
            x,
            y,
            w: if y.is_some() { 1.0 } else { 0.0 },
            category: y.map(|_| Arc::from("email")),
        }
    }

    #[test]
    fn disjoint_rows_merge() {
        let cfg = CompressionConfig::default();
        let a = row(10, &[0.5, 0.0], None);
        let s = row(10, &[0.0, 0.7], None);
        assert!(mergeable(&a, &s, &cfg));
        let (out, report) = compress_stream(&[a, s], &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].delta_ms, 20 * M);
        assert_eq!(&out[0].x[1..], &[0.5, 0.7]);
        assert_eq!(out[0].x[0], rescale(20.0, 0.0, 60.0) as f32);
        assert_eq!(report.ratio(), 0.5);
    }

    #[test]
    fn labeled_accumulator_never_absorbs() {
        let cfg = CompressionConfig::default();
        let a = row(1, &[0.0, 0.0], Some(1));
        let s = row(1, &[0.3, 0.0], None);
        assert_eq!(merge_check(&a, &s, &cfg), Err(Blocked::GroundTruth));
    }

    #[test]
    fn differing_values_clash() {
        let cfg = CompressionConfig::default();
        assert_eq!(
            merge_check(&row(1, &[0.5], None), &row(1, &[0.6], None), &cfg),
            Err(Blocked::Clash)
        );
        assert!(mergeable(&row(1, &[0.5], None), &row(1, &[0.5], None), &cfg));
    }

    #[test]
    fn threshold_bounds_span() {
        let cfg = CompressionConfig {
            threshold_minutes: Some(15.0),
            ..Default::default()
        };
        assert!(mergeable(&row(10, &[0.5], None), &row(5, &[0.0], None), &cfg));
        assert_eq!(
            merge_check(&row(10, &[0.5], None), &row(6, &[0.0], None), &cfg),
            Err(Blocked::Threshold)
        );
    }

    #[test]
    fn labeled_successor_is_absorbed_then_stops() {
        let cfg = CompressionConfig::default();
        let rows = vec![
            row(5, &[0.5, 0.0], None),
            row(5, &[0.0, 0.0], Some(0)),
            row(5, &[0.0, 0.9], None),
        ];
        let (out, report) = compress_stream(&rows, &cfg);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].y, Some(0));
        assert_eq!(out[0].w, 1.0);
        assert_eq!(out[0].delta_ms, 10 * M);
        assert_eq!(report.blocked_ground_truth, 1);
    }

    #[test]
    fn single_and_empty() {
        let cfg = CompressionConfig::default();
        let r = row(3, &[0.2], None);
        assert_eq!(compress_stream(&[r.clone()], &cfg).0, vec![r]);
        assert!(compress_stream(&[], &cfg).0.is_empty());
        assert_eq!(compress_stream(&[], &cfg).1.ratio(), 0.0);
    }

    #[test]
    fn merged_delta_is_not_recapped() {
        let cfg = CompressionConfig::default();
        let (out, _) = compress_stream(&[row(50, &[0.1, 0.0], None), row(50, &[0.0, 0.1], None)], &cfg);
        assert_eq!(out[0].delta_ms, 100 * M);
        assert_eq!(out[0].x[0], 1.0);
    }

    #[test]
    fn report_text() {
        let r = CompressionReport {
            rows_in: 10,
            rows_out: 4,
            blocked_clash: 2,
            blocked_ground_truth: 1,
            blocked_threshold: 0,
        };
        assert!(r.to_text().contains("ratio=0.600000\n"));
    }

    fn arb_rows() -> impl Strategy<Value = Vec<SampleRow>> {
        let cell = prop_oneof![6 => Just(0.0f32), 1 => Just(0.5f32), 1 => Just(1.0f32), 1 => 0.05f32..1.0];
        let r = (0i64..90, proptest::collection::vec(cell, 5), prop::option::weighted(0.1, 0u8..2));
        proptest::collection::vec(r, 0..60).prop_map(|v| {
            v.into_iter()
                .map(|(d, vals, y)| row(d, &vals, y))
                .collect()
        })
    }

    fn collapsed(rows: &[SampleRow], j: usize) -> Vec<f32> {
        let mut seq: Vec<f32> = Vec::new();
        for v in rows.iter().map(|r| r.x[j]).filter(|v| *v != 0.0) {
            if seq.last() != Some(&v) {
                seq.push(v);
            }
        }
        seq
    }

    proptest! {
        #[test]
        fn compression_is_lossless(rows in arb_rows(), t in prop::option::of(1.0f64..200.0)) {
            let cfg = CompressionConfig { threshold_minutes: t, ..Default::default() };
            let (out, report) = compress_stream(&rows, &cfg);
            prop_assert!(out.len() <= rows.len());
            prop_assert_eq!(report.rows_out, out.len());
            for j in 1..6 {
                prop_assert_eq!(collapsed(&rows, j), collapsed(&out, j));
            }
            let labels = |rs: &[SampleRow]| rs.iter().filter(|r| r.y.is_some()).map(|r| (r.y, r.w.to_bits())).collect::<Vec<_>>();
            prop_assert_eq!(labels(&rows), labels(&out));
            prop_assert_eq!(rows.iter().map(|r| r.delta_ms).sum::<i64>(), out.iter().map(|r| r.delta_ms).sum::<i64>());
        }
    }
}
