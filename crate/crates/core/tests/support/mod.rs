//! Independent oracles and random inputs shared by integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng;
use sensorseq::encoder::SampleRow;

const MINUTE_MS: i64 = 60_000;

fn delta_feature(delta_ms: i64, cap_minutes: f64) -> f32 {
    let minutes = (delta_ms as f64 / MINUTE_MS as f64).min(cap_minutes).max(0.0);
    (0.05 + 0.95 * minutes / cap_minutes) as f32
}

fn carries_truth(r: &SampleRow) -> bool {
    r.y.is_some() || r.w != 0.0
}

fn can_absorb(a: &SampleRow, b: &SampleRow, threshold_minutes: Option<f64>) -> bool {
    if carries_truth(a) {
        return false;
    }
    for j in 1..a.x.len() {
        let (p, q) = (a.x[j], b.x[j]);
        if p != 0.0 && q != 0.0 && p != q {
            return false;
        }
    }
    match threshold_minutes {
        Some(t) => a.delta_ms + b.delta_ms <= (t * MINUTE_MS as f64).round() as i64,
        None => true,
    }
}

fn absorb(a: &SampleRow, b: &SampleRow, cap_minutes: f64) -> SampleRow {
    let mut x: Vec<f32> = a.x.iter().zip(&b.x).map(|(p, q)| if *p != 0.0 { *p } else { *q }).collect();
    let delta_ms = a.delta_ms + b.delta_ms;
    x[0] = delta_feature(delta_ms, cap_minutes);
    let (y, w, category) = if carries_truth(b) {
        (b.y, b.w, b.category.clone())
    } else {
        (a.y, a.w, a.category.clone())
    };
    SampleRow {
        user_id: a.user_id.clone(),
        wall_time_ms: b.wall_time_ms,
        delta_ms,
        x,
        y,
        w,
        category,
    }
}

/// Merges the leftmost absorbable neighbour pair, over and over, until no
/// pair can be merged.
pub fn reference_compress(rows: &[SampleRow], threshold_minutes: Option<f64>, cap_minutes: f64) -> Vec<SampleRow> {
    let mut out = rows.to_vec();
    loop {
        let hit = (0..out.len().saturating_sub(1)).find(|&i| can_absorb(&out[i], &out[i + 1], threshold_minutes));
        let Some(i) = hit else { return out };
        let merged = absorb(&out[i], &out[i + 1], cap_minutes);
        out[i] = merged;
        out.remove(i + 1);
    }
}

/// Concordance over every positive/negative pair, ties counting half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut good = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                good += 1.0;
            } else if si == sj {
                good += 0.5;
            }
        }
    }
    good / pairs
}

/// Padded slots for row counts laid out as `length`-row sequences, users
/// sorted by sequence count and grouped `batch` at a time.
pub fn padding_slots(row_counts: &[usize], length: usize, batch: usize) -> (usize, usize) {
    let mut seqs: Vec<usize> = row_counts.iter().map(|n| n.div_ceil(length)).collect();
    seqs.sort_unstable_by(|a, b| b.cmp(a));
    let mut slots = 0;
    let mut i = 0;
    while i < seqs.len() {
        slots += seqs[i] * batch * length;
        i += batch;
    }
    let real: usize = row_counts.iter().sum();
    (slots, slots - real)
}

/// Non-zero values of column `j` with consecutive repeats collapsed.
pub fn collapsed(rows: &[SampleRow], j: usize) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::new();
    for r in rows {
        let v = r.x[j];
        if v != 0.0 && out.last() != Some(&v.to_bits()) {
            out.push(v.to_bits());
        }
    }
    out
}

pub struct StreamShape {
    pub rows: usize,
    pub width: usize,
    pub sparsity: f64,
    pub label_rate: f64,
}

impl StreamShape {
    /// Up to 200 rows, 8 to 20 columns, 70 to 95 % zeros, about 2 % labeled.
    pub fn fuzz<R: Rng>(rng: &mut R) -> Self {
        Self {
            rows: rng.random_range(0..=200),
            width: rng.random_range(8..=20),
            sparsity: rng.random_range(0.70..=0.95),
            label_rate: 0.02,
        }
    }
}

const PALETTE: [f32; 5] = [0.05, 0.3, 0.55, 0.8, 1.0];

/// A chronological stream of encoded rows. Values come from a small
/// palette so equal successive values are common.
pub fn random_stream<R: Rng>(rng: &mut R, user: &str, shape: &StreamShape) -> Vec<SampleRow> {
    let user: Arc<str> = Arc::from(user);
    let mut wall = 1_000_000_000i64;
    (0..shape.rows)
        .map(|_| {
            let delta_ms = if rng.random_bool(0.1) { 0 } else { rng.random_range(1..=60 * MINUTE_MS) };
            wall += delta_ms;
            let mut x: Vec<f32> = (0..shape.width)
                .map(|_| {
                    if rng.random_bool(shape.sparsity) {
                        0.0
                    } else {
                        PALETTE[rng.random_range(0..PALETTE.len())]
                    }
                })
                .collect();
            x[0] = delta_feature(delta_ms, 60.0);
            let labeled = rng.random_bool(shape.label_rate);
            SampleRow {
                user_id: user.clone(),
                wall_time_ms: wall,
                delta_ms,
                x,
                y: labeled.then(|| rng.random_range(0..=1u8)),
                w: if labeled && rng.random_bool(0.5) { rng.random_range(0.2..3.0) } else { 0.0 },
                category: labeled.then(|| Arc::from(["messaging", "email"][rng.random_range(0..2)])),
            }
        })
        .collect()
}
