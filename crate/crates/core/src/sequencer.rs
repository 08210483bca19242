//! User buckets, interleaved batches and state-reset markers for stateful
//! training.
//!
//! Users are sorted by sequence count (descending) and chunked into
//! buckets of `batch_size` lanes. Within a bucket, batch `t` holds every
//! lane's `t`-th sequence of `sequence_length` rows, so the recurrent
//! state of lane `u` at the end of batch `t` is the right starting state
//! for batch `t + 1`. Padding is appended at the tail of a lane only.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::SampleRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequencerConfig {
    pub sequence_length: usize,
    pub batch_size: usize,
}

impl Default for SequencerConfig {
    fn default() -> Self {
        Self {
            sequence_length: 32,
            batch_size: 8,
        }
    }
}

impl SequencerConfig {
    pub fn sequences_for(&self, rows: usize) -> usize {
        rows.div_ceil(self.sequence_length)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanePlan {
    pub user_id: String,
    pub rows: usize,
    pub sequences: usize,
}

/// Planned bucket: lane order is fixed for all of its batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketPlan {
    pub lanes: Vec<LanePlan>,
    pub depth: usize,
}

impl BucketPlan {
    /// Padded sequences in this bucket, counting empty lanes.
    pub fn padding_sequences(&self, batch_size: usize) -> usize {
        batch_size * self.depth - self.lanes.iter().map(|l| l.sequences).sum::<usize>()
    }
}

/// `(user, row count)` pairs into buckets, largest users first.
pub fn plan_buckets(users: &[(String, usize)], config: &SequencerConfig) -> Vec<BucketPlan> {
    let mut lanes: Vec<LanePlan> = users
        .iter()
        .map(|(u, rows)| LanePlan {
            user_id: u.clone(),
            rows: *rows,
            sequences: config.sequences_for(*rows),
        })
        .collect();
    lanes.sort_by(|a, b| b.sequences.cmp(&a.sequences).then_with(|| a.user_id.cmp(&b.user_id)));
    lanes
        .chunks(config.batch_size)
        .map(|chunk| BucketPlan {
            depth: chunk.iter().map(|l| l.sequences).max().unwrap_or(0),
            lanes: chunk.to_vec(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `lanes[u]` holds exactly `sequence_length` rows.
    pub lanes: Vec<Vec<SampleRow>>,
    /// Lane state must be zeroed before this batch.
    pub reset_mask: Vec<bool>,
}

impl Batch {
    pub fn steps(&self) -> usize {
        self.lanes.first().map_or(0, Vec::len)
    }

    pub fn width(&self) -> usize {
        self.lanes
            .iter()
            .flatten()
            .next()
            .map_or(0, |r| r.x.len())
    }

    pub fn labeled_rows(&self) -> usize {
        self.lanes.iter().flatten().filter(|r| r.is_labeled()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub users: Vec<Option<Arc<str>>>,
    pub depth: usize,
    pub batches: Vec<Batch>,
}

/// Cuts the planned users' rows into the bucket's batches. `rows_of`
/// returns a user's chronological rows.
pub fn build_batches<'a, F>(plan: &BucketPlan, rows_of: F, config: &SequencerConfig, width: usize) -> Bucket
where
    F: Fn(&str) -> &'a [SampleRow],
{
    let l = config.sequence_length;
    let mut users: Vec<Option<Arc<str>>> = plan.lanes.iter().map(|p| Some(Arc::from(p.user_id.as_str()))).collect();
    users.resize(config.batch_size, None);
    let lane_rows: Vec<&[SampleRow]> = plan.lanes.iter().map(|p| rows_of(&p.user_id)).collect();
    let empty_lane: Arc<str> = Arc::from("");
    let mut batches = Vec::with_capacity(plan.depth);
    for t in 0..plan.depth {
        let mut lanes = Vec::with_capacity(config.batch_size);
        for (u, user) in users.iter().enumerate() {
            let owner = user.clone().unwrap_or_else(|| empty_lane.clone());
            let src = lane_rows.get(u).copied().unwrap_or(&[]);
            let lo = (t * l).min(src.len());
            let hi = ((t + 1) * l).min(src.len());
            let mut seq: Vec<SampleRow> = src[lo..hi].to_vec();
            seq.resize_with(l, || SampleRow::padding(owner.clone(), width));
            lanes.push(seq);
        }
        batches.push(Batch {
            lanes,
            reset_mask: vec![t == 0; config.batch_size],
        });
    }
    Bucket {
        users,
        depth: plan.depth,
        batches,
    }
}

#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub config: SequencerConfig,
    pub buckets: Vec<Bucket>,
    pub real_rows: usize,
}

impl BatchPlan {
    /// Plans and builds all buckets for per-user row streams.
    pub fn build(users: &[(Arc<str>, Vec<SampleRow>)], config: SequencerConfig, width: usize) -> Self {
        let counts: Vec<(String, usize)> = users.iter().map(|(u, r)| (u.to_string(), r.len())).collect();
        let plans = plan_buckets(&counts, &config);
        let lookup: std::collections::HashMap<&str, &[SampleRow]> =
            users.iter().map(|(u, r)| (&**u, r.as_slice())).collect();
        let buckets = plans
            .iter()
            .map(|p| build_batches(p, |u| lookup[u], &config, width))
            .collect();
        Self {
            config,
            buckets,
            real_rows: counts.iter().map(|(_, n)| n).sum(),
        }
    }

    pub fn batch_count(&self) -> usize {
        self.buckets.iter().map(|b| b.batches.len()).sum()
    }

    pub fn slot_count(&self) -> usize {
        self.batch_count() * self.config.batch_size * self.config.sequence_length
    }

    pub fn padding_fraction(&self) -> f64 {
        let slots = self.slot_count();
        if slots == 0 {
            0.0
        } else {
            (slots - self.real_rows) as f64 / slots as f64
        }
    }

    /// Batches in training order. With a seed, bucket order is shuffled;
    /// batch order inside a bucket never is.
    pub fn iter(&self, shuffle_seed: Option<u64>) -> impl Iterator<Item = (&Batch, usize, usize)> {
        let mut order: Vec<usize> = (0..self.buckets.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order.into_iter().flat_map(move |b| {
            self.buckets[b]
                .batches
                .iter()
                .enumerate()
                .map(move |(i, batch)| (batch, b, i))
        })
    }

    /// Text manifest: one block per bucket listing lanes, their row and
    /// sequence counts, and padding.
    pub fn manifest(&self) -> String {
        let l = self.config.sequence_length;
        let b = self.config.batch_size;
        let mut s = format!(
            "sequence_length={l}\nbatch_size={b}\nbuckets={}\nbatches={}\nreal_rows={}\npadding_fraction={:.6}\n",
            self.buckets.len(),
            self.batch_count(),
            self.real_rows,
            self.padding_fraction()
        );
        for (i, bucket) in self.buckets.iter().enumerate() {
            let real: usize = bucket
                .batches
                .iter()
                .flat_map(|bt| bt.lanes.iter().flatten())
                .filter(|r| !r.is_padding())
                .count();
            s.push_str(&format!(
                "bucket {i} depth={} padded_rows={}\n",
                bucket.depth,
                b * bucket.depth * l - real
            ));
            for (lane, user) in bucket.users.iter().enumerate() {
                let rows = bucket
                    .batches
                    .iter()
                    .map(|bt| bt.lanes[lane].iter().filter(|r| !r.is_padding()).count())
                    .sum::<usize>();
                s.push_str(&format!(
                    "  lane {lane} user={} rows={rows} sequences={}\n",
                    user.as_deref().unwrap_or("-"),
                    rows.div_ceil(l)
                ));
            }
        }
        s
    }
}

/// Concatenates lane `u` over a bucket's batches and strips tail padding.
pub fn reassemble_lane(bucket: &Bucket, lane: usize) -> Vec<SampleRow> {
    let mut rows: Vec<SampleRow> = bucket
        .batches
        .iter()
        .flat_map(|b| b.lanes[lane].iter().cloned())
        .collect();
    while rows.last().is_some_and(SampleRow::is_padding) {
        rows.pop();
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(l: usize, b: usize) -> SequencerConfig {
        SequencerConfig {
            sequence_length: l,
            batch_size: b,
        }
    }

    fn user_rows(user: &str, n: usize) -> Vec<SampleRow> {
        (0..n)
            .map(|i| SampleRow {
                user_id: Arc::from(user),
                wall_time_ms: i as i64,
                delta_ms: 1,
                x: vec![0.5, (i % 7) as f32 / 10.0],
                y: (i % 4 == 0).then_some((i % 2) as u8),
                w: if i % 4 == 0 { 1.0 } else { 0.0 },
                category: None,
            })
            .collect()
    }

    /// Brute-force minimum of total padded sequences (empty lanes count)
    /// over every assignment of users to `ceil(n / b)` buckets of at most
    /// `b` lanes.
    fn min_padding(counts: &[usize], b: usize) -> usize {
        let k = counts.len().div_ceil(b);
        let mut best = usize::MAX;
        let mut assign = vec![0usize; counts.len()];
        loop {
            let mut sizes = vec![0; k];
            let mut depth = vec![0; k];
            for (i, g) in assign.iter().enumerate() {
                sizes[*g] += 1;
                depth[*g] = depth[*g].max(counts[i]);
            }
            if sizes.iter().all(|s| *s <= b) {
                let cost: usize = depth.iter().map(|d| b * d).sum::<usize>() - counts.iter().sum::<usize>();
                best = best.min(cost);
            }
            let mut i = 0;
            loop {
                if i == assign.len() {
                    return best;
                }
                assign[i] += 1;
                if assign[i] < k {
                    break;
                }
                assign[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn descending_chunks() {
        let counts = [9usize, 8, 8, 3, 3, 2];
        let users: Vec<(String, usize)> = counts
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("u{i}"), c * 5))
            .collect();
        let plan = plan_buckets(&users, &cfg(5, 3));
        assert_eq!(plan.len(), 2);
        let seqs = |b: &BucketPlan| b.lanes.iter().map(|l| l.sequences).collect::<Vec<_>>();
        assert_eq!(seqs(&plan[0]), vec![9, 8, 8]);
        assert_eq!(seqs(&plan[1]), vec![3, 3, 2]);
        let padding: usize = plan.iter().map(|b| b.padding_sequences(3)).sum();
        assert_eq!(padding, 3);
        assert_eq!(padding, min_padding(&counts, 3));
    }

    #[test]
    fn sorted_chunking_matches_brute_force() {
        let cases: &[(&[usize], usize)] = &[
            (&[10, 1, 1, 1], 3),
            (&[4, 7, 1, 9, 2, 2, 5], 3),
            (&[3, 3, 3, 8, 1], 2),
            (&[6, 2, 5, 1, 1, 4, 3], 4),
        ];
        for (counts, b) in cases {
            let users: Vec<(String, usize)> = counts.iter().enumerate().map(|(i, c)| (format!("u{i}"), *c)).collect();
            let plan = plan_buckets(&users, &cfg(1, *b));
            let padding: usize = plan.iter().map(|p| p.padding_sequences(*b)).sum();
            assert_eq!(padding, min_padding(counts, *b), "{counts:?} b={b}");
        }
    }

    #[test]
    fn one_user_one_bucket() {
        let plan = plan_buckets(&[("a".into(), 10)], &cfg(5, 1));
        assert_eq!(plan.len(), 1);
        assert_eq!(plan[0].padding_sequences(1), 0);
    }

    #[test]
    fn figure_shape_three_users() {
        let users: Vec<(Arc<str>, Vec<SampleRow>)> = ["a", "b", "c"]
            .iter()
            .map(|u| (Arc::from(*u), user_rows(u, 15)))
            .collect();
        let plan = BatchPlan::build(&users, cfg(5, 3), 2);
        assert_eq!(plan.batch_count(), 3);
        for (batch, _, _) in plan.iter(None) {
            assert_eq!(batch.lanes.len() * batch.steps(), 15);
        }
        assert_eq!(plan.padding_fraction(), 0.0);
    }

    #[test]
    fn thirteen_rows_make_two_full_and_one_padded_sequence() {
        let users = vec![(Arc::from("a"), user_rows("a", 13))];
        let plan = BatchPlan::build(&users, cfg(5, 1), 2);
        let b = &plan.buckets[0];
        assert_eq!(b.batches.len(), 3);
        let last = &b.batches[2].lanes[0];
        assert_eq!(last.iter().filter(|r| r.is_padding()).count(), 2);
        assert!(!last[2].is_padding() && last[3].is_padding());
        assert_eq!(reassemble_lane(b, 0), users[0].1);
    }

    #[test]
    fn empty_lane_is_all_padding() {
        let users = vec![(Arc::from("a"), user_rows("a", 7)), (Arc::from("b"), Vec::new())];
        let plan = BatchPlan::build(&users, cfg(4, 3), 2);
        let b = &plan.buckets[0];
        for batch in &b.batches {
            assert!(batch.lanes[1].iter().all(|r| r.is_padding() && r.w == 0.0));
            assert!(batch.lanes[2].iter().all(|r| r.is_padding() && r.w == 0.0));
        }
        assert_eq!(b.users[2], None);
    }

    #[test]
    fn resets_at_bucket_starts() {
        let users: Vec<(Arc<str>, Vec<SampleRow>)> =
            (0..4).map(|i| (Arc::from(format!("u{i}").as_str()), user_rows("x", 30))).collect();
        let plan = BatchPlan::build(&users, cfg(10, 2), 2);
        let resets: Vec<usize> = plan
            .iter(None)
            .enumerate()
            .filter(|(_, (b, _, _))| b.reset_mask.iter().all(|m| *m))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(plan.batch_count(), 6);
        assert_eq!(resets, vec![0, 3]);
        for (b, _, i) in plan.iter(None) {
            assert_eq!(b.reset_mask.iter().any(|m| *m), i == 0);
        }
    }

    #[test]
    fn shuffle_keeps_batches_in_bucket_order() {
        let users: Vec<(Arc<str>, Vec<SampleRow>)> =
            (0..9).map(|i| (Arc::from(format!("u{i}").as_str()), user_rows("x", 5 + i * 3))).collect();
        let plan = BatchPlan::build(&users, cfg(4, 2), 2);
        let seen: Vec<(usize, usize)> = plan.iter(Some(11)).map(|(_, b, i)| (b, i)).collect();
        assert_eq!(seen.len(), plan.batch_count());
        for w in seen.windows(2) {
            if w[0].0 == w[1].0 {
                assert_eq!(w[1].1, w[0].1 + 1);
            } else {
                assert_eq!(w[1].1, 0);
            }
        }
        let a: Vec<_> = plan.iter(None).map(|(_, b, i)| (b, i)).collect();
        let b: Vec<_> = plan.iter(None).map(|(_, b, i)| (b, i)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_mentions_every_lane() {
        let users = vec![(Arc::from("a"), user_rows("a", 9)), (Arc::from("b"), user_rows("b", 3))];
        let plan = BatchPlan::build(&users, cfg(4, 2), 2);
        let m = plan.manifest();
        assert!(m.contains("lane 0 user=a rows=9 sequences=3"));
        assert!(m.contains("lane 1 user=b rows=3 sequences=1"));
        assert!(m.contains("padding_fraction=0.500000"));
    }
}
