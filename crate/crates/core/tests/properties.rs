mod support;

use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sensorseq::compressor::{compress_stream, CompressionConfig};
use sensorseq::encoder::SampleRow;
use sensorseq::eval::auc;
use sensorseq::sequencer::{reassemble_lane, BatchPlan, SequencerConfig};
use sensorseq::weighting::{apply_weights, compute_weights, WeightStrategy};

use support::{collapsed, padding_slots, pairwise_auc, random_stream, reference_compress, StreamShape};

fn config(threshold_minutes: Option<f64>) -> CompressionConfig {
    CompressionConfig {
        threshold_minutes,
        delta_cap_minutes: 60.0,
    }
}

fn row(delta_min: i64, vals: &[f32], y: Option<u8>) -> SampleRow {
    let mut x = vec![(0.05 + 0.95 * (delta_min as f64).min(60.0) / 60.0) as f32];
    x.extend_from_slice(vals);
    SampleRow {
        user_id: Arc::from("u"),
        wall_time_ms: 0,
        delta_ms: delta_min * 60_000,
        x,
        y,
        w: 0.0,
        category: None,
    }
}

#[test]
fn oracle_hand_cases() {
    let merged = reference_compress(&[row(10, &[0.5, 0.0], None), row(10, &[0.0, 0.7], None)], None, 60.0);
    assert_eq!(merged.len(), 1);
    assert_eq!(merged[0].delta_ms, 20 * 60_000);
    assert_eq!(&merged[0].x[1..], &[0.5, 0.7]);

    let clashing = vec![row(1, &[0.3], None), row(1, &[0.6], None), row(1, &[0.3], None)];
    assert_eq!(reference_compress(&clashing, None, 60.0), clashing);
    assert!(reference_compress(&[], None, 60.0).is_empty());

    let labeled_first = vec![row(1, &[0.3, 0.0], Some(1)), row(1, &[0.0, 0.6], None)];
    assert_eq!(reference_compress(&labeled_first, None, 60.0), labeled_first);
}

#[test]
fn greedy_matches_fixpoint_oracle_on_fuzz_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..400 {
        let shape = StreamShape::fuzz(&mut rng);
        let rows = random_stream(&mut rng, "u", &shape);
        let t = [None, Some(5.0), Some(45.0), Some(120.0)][case % 4];
        let (got, report) = compress_stream(&rows, &config(t));
        assert_eq!(got, reference_compress(&rows, t, 60.0), "case {case}");
        assert_eq!(report.rows_out, got.len());
    }
}

#[test]
fn labeled_rows_survive_in_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let mut shape = StreamShape::fuzz(&mut rng);
        shape.label_rate = 0.2;
        let rows = random_stream(&mut rng, "u", &shape);
        let (out, _) = compress_stream(&rows, &config(None));
        let before: Vec<(Option<u8>, u64)> = rows.iter().filter(|r| r.y.is_some()).map(|r| (r.y, r.w.to_bits())).collect();
        let after: Vec<(Option<u8>, u64)> = out.iter().filter(|r| r.y.is_some()).map(|r| (r.y, r.w.to_bits())).collect();
        assert_eq!(before, after);
        for j in 1..shape.width {
            assert_eq!(collapsed(&rows, j), collapsed(&out, j));
        }
        assert_eq!(
            rows.iter().map(|r| r.delta_ms).sum::<i64>(),
            out.iter().map(|r| r.delta_ms).sum::<i64>()
        );
    }
}

proptest! {
    #[test]
    fn rank_auc_matches_concordance(
        pairs in prop::collection::vec((0u8..6, 0u8..2), 2..80)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| f64::from(*s) / 5.0).collect();
        let labels: Vec<u8> = pairs.iter().map(|(_, l)| *l).collect();
        let both = labels.contains(&0) && labels.contains(&1);
        prop_assume!(both);
        let got = auc(&scores, &labels).unwrap();
        prop_assert!((got - pairwise_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn non_binary_weights_sum_to_label_count(
        counts in prop::collection::vec((0usize..40, 0usize..40), 1..8)
    ) {
        let users: Vec<Vec<SampleRow>> = counts
            .iter()
            .enumerate()
            .map(|(u, (neg, pos))| {
                let mut rows = Vec::new();
                for k in 0..neg + pos {
                    let mut r = row(1, &[0.5], Some(u8::from(k >= *neg)));
                    r.user_id = Arc::from(format!("u{u}"));
                    rows.push(r);
                    rows.push(SampleRow { y: None, ..rows.last().unwrap().clone() });
                }
                rows
            })
            .collect();
        for strategy in [WeightStrategy::InverseFrequency, WeightStrategy::InverseSqrtFrequency, WeightStrategy::InverseLogFrequency] {
            let table = compute_weights(users.iter().map(Vec::as_slice), strategy);
            for (u, (neg, pos)) in counts.iter().enumerate() {
                let mut rows = users[u].clone();
                apply_weights(&mut rows, &table).unwrap();
                let sum: f64 = rows.iter().map(|r| r.w).sum();
                prop_assert!((sum - (neg + pos) as f64).abs() < 1e-9);
                prop_assert!(rows.iter().filter(|r| r.y.is_none()).all(|r| r.w == 0.0));
            }
        }
    }
}

fn random_cohort(rng: &mut ChaCha8Rng) -> Vec<(Arc<str>, Vec<SampleRow>)> {
    let users = rng.random_range(1..=12);
    (0..users)
        .map(|u| {
            let name = format!("user{u:02}");
            let shape = StreamShape {
                rows: rng.random_range(1..=150),
                width: 6,
                sparsity: 0.5,
                label_rate: 0.1,
            };
            (Arc::from(name.as_str()), random_stream(rng, &name, &shape))
        })
        .collect()
}

#[test]
fn sequencer_round_trip_and_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..200 {
        let cohort = random_cohort(&mut rng);
        let cfg = SequencerConfig {
            sequence_length: rng.random_range(1..=40),
            batch_size: rng.random_range(1..=6),
        };
        let plan = BatchPlan::build(&cohort, cfg, 6);
        let by_user: BTreeMap<&str, &Vec<SampleRow>> = cohort.iter().map(|(u, r)| (&**u, r)).collect();
        let mut seen = 0;
        for bucket in &plan.buckets {
            for (lane, user) in bucket.users.iter().enumerate() {
                let back = reassemble_lane(bucket, lane);
                match user {
                    Some(u) => {
                        assert_eq!(&back, by_user[&**u]);
                        seen += 1;
                    }
                    None => assert!(back.is_empty()),
                }
            }
        }
        assert_eq!(seen, cohort.len());
        let labeled_in: usize = cohort.iter().flat_map(|(_, r)| r).filter(|r| r.is_labeled()).count();
        let labeled_out: usize = plan
            .buckets
            .iter()
            .flat_map(|b| &b.batches)
            .map(|b| b.labeled_rows())
            .sum();
        assert_eq!(labeled_in, labeled_out);
        let counts: Vec<usize> = cohort.iter().map(|(_, r)| r.len()).collect();
        let (slots, padding) = padding_slots(&counts, cfg.sequence_length, cfg.batch_size);
        assert_eq!(plan.slot_count(), slots);
        assert_eq!(plan.padding_fraction(), padding as f64 / slots as f64);
    }
}
