use std::collections::BTreeMap;
use std::sync::Arc;

use domus_core::downstream::EventMultiset;
use domus_core::event::{clean_alternation, merge_streams, Event, EventStream, Sensor, Status};
use domus_core::evaluation::{kfold_splits, multiset_prf, subsample_training, weighted_f1};
use domus_core::ingestion::{build_sampling_plan, parse_event_csv, write_event_csv, Dataset};
use domus_core::segmentation::{segment_events, window_starts};
use proptest::prelude::*;

fn sensor(i: u8) -> Arc<Sensor> {
    let rooms = ["kitchen", "hall", "bed room"];
    let items = [Some("stove"), None, Some("bed, double")];
    Arc::new(Sensor::new(&format!("S{i}"), items[i as usize % 3], Some(rooms[i as usize % 3]), "motion").unwrap())
}

/// Sorted stream with strictly increasing timestamps over a few sensors.
fn arb_stream(max: usize) -> impl Strategy<Value = EventStream> {
    prop::collection::vec((1i64..500, 0u8..4, any::<bool>(), prop::option::of(0u8..3)), 0..max).prop_map(|raw| {
        let sensors: Vec<_> = (0..4).map(sensor).collect();
        let mut t = 1_700_000_000;
        let events = raw
            .into_iter()
            .map(|(dt, s, on, act)| {
                t += dt;
                let e = Event::new(t, sensors[s as usize].clone(), if on { Status::On } else { Status::Off });
                match act {
                    Some(a) => e.labeled(["cook", "sleep", "eat"][a as usize]),
                    None => e,
                }
            })
            .collect();
        EventStream::new(events)
    })
}

proptest! {
    #[test]
    fn cleaning_is_idempotent_and_alternating(stream in arb_stream(80)) {
        let (once, report) = clean_alternation(&stream).unwrap();
        let (twice, again) = clean_alternation(&once).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(again.removed_count, 0);
        prop_assert!(once.alternates());
        prop_assert_eq!(once.len() + report.removed_count, stream.len());
    }

    #[test]
    fn window_count_matches_enumeration(t in 0usize..400, n in 1usize..60, o in 0usize..60) {
        prop_assume!(o < n);
        let starts = window_starts(t, n, o).unwrap();
        let expected = if t < n { 0 } else { (t - n) / (n - o) + 1 };
        prop_assert_eq!(starts.len(), expected);
        let enumerated = (0..t).filter(|s| s % (n - o) == 0 && s + n <= t).count();
        prop_assert_eq!(starts.len(), enumerated);
    }

    #[test]
    fn windows_are_contiguous_slices(stream in arb_stream(60), n in 1usize..10) {
        let windows = segment_events(&stream, 0, n, n - 1).unwrap();
        for w in &windows {
            prop_assert_eq!(&w.events[..], &stream.events[w.start..w.start + n]);
            prop_assert_eq!(w.label.clone(), w.events.last().unwrap().activity.clone());
        }
    }

    #[test]
    fn csv_roundtrip(stream in arb_stream(60)) {
        let (clean, _) = clean_alternation(&stream).unwrap();
        let ds = Dataset::from_stream("p", clean).unwrap();
        let bytes = write_event_csv(&ds);
        let back = parse_event_csv("p", &bytes).unwrap();
        prop_assert_eq!(&back.stream, &ds.stream);
        prop_assert_eq!(write_event_csv(&back), bytes);
    }

    #[test]
    fn merged_streams_have_unique_increasing_times(a in arb_stream(30), b in arb_stream(30), shift in 0i64..3) {
        let b = EventStream::new(b.events.into_iter().map(|mut e| { e.timestamp += shift; e }).collect());
        let merged = merge_streams(&[a.clone(), b.clone()]).unwrap();
        prop_assert_eq!(merged.len(), a.len() + b.len());
        prop_assert!(merged.check_sorted().is_ok() || merged.is_empty());
    }

    #[test]
    fn sampling_plan_draws_quota_per_dataset(counts in prop::collection::vec(1usize..50, 1..5), quota in 1usize..40, seed in any::<u64>()) {
        let plan = build_sampling_plan(&counts, quota, seed).unwrap();
        let draws = plan.epoch(3);
        prop_assert_eq!(draws.len(), quota * counts.len());
        for (d, &c) in counts.iter().enumerate() {
            let mine: Vec<usize> = draws.iter().filter(|x| x.dataset == d).map(|x| x.window).collect();
            prop_assert_eq!(mine.len(), quota);
            prop_assert!(mine.iter().all(|&w| w < c));
            if c >= quota {
                let mut u = mine.clone();
                u.sort_unstable();
                u.dedup();
                prop_assert_eq!(u.len(), quota);
            }
        }
        prop_assert_eq!(plan.epoch(3), draws);
    }

    #[test]
    fn subsample_is_a_subset(n in 1usize..300, pct in 1u32..=100, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let sub = subsample_training(&items, f64::from(pct), seed).unwrap();
        let expect = ((f64::from(pct) * n as f64 / 100.0) + 0.5).floor().max(1.0) as usize;
        prop_assert_eq!(sub.len(), expect.min(n));
        let mut s = sub.clone();
        s.sort_unstable();
        s.dedup();
        prop_assert_eq!(s.len(), sub.len());
    }

    #[test]
    fn folds_partition_without_shared_events(n in 2usize..120, len in 1usize..40, stride in 1usize..5, folds in 2usize..6, horizon in 0usize..10) {
        prop_assume!(n >= folds);
        let spans: Vec<(usize, usize)> = (0..n).map(|i| (i * stride, i * stride + len - 1)).collect();
        let split = kfold_splits(&spans, folds, horizon).unwrap();
        let mut tested: Vec<usize> = split.iter().flat_map(|f| f.test.clone()).collect();
        tested.sort_unstable();
        prop_assert_eq!(tested, (0..n).collect::<Vec<_>>());
        for f in &split {
            prop_assert!(f.test.windows(2).all(|w| w[1] == w[0] + 1));
            for &tr in &f.train {
                for &te in &f.test {
                    let (a, b) = (spans[tr], spans[te]);
                    prop_assert!(a.1 + horizon < b.0 || a.0 > b.1 + horizon);
                }
            }
        }
    }

    #[test]
    fn weighted_f1_matches_confusion_matrix(pairs in prop::collection::vec((0u8..5, 0u8..5), 1..60)) {
        let (pred, label): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let mut m = [[0f64; 5]; 5];
        for (&p, &l) in pred.iter().zip(&label) {
            m[l as usize][p as usize] += 1.0;
        }
        let n = label.len() as f64;
        let mut expect = 0.0;
        for c in 0..5 {
            let row: f64 = m[c].iter().sum();
            let col: f64 = (0..5).map(|r| m[r][c]).sum();
            if row == 0.0 { continue; }
            let p = if col > 0.0 { m[c][c] / col } else { 0.0 };
            let r = m[c][c] / row;
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            expect += f * row / n;
        }
        let got = weighted_f1(&pred, &label).unwrap();
        prop_assert!((got - expect).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn multiset_prf_matches_expansion(gt in prop::collection::btree_map(0u8..6, 1u32..5, 1..5), pred in prop::collection::btree_map(0u8..6, 1u32..5, 1..5)) {
        let to_ms = |m: &BTreeMap<u8, u32>| {
            let mut out = EventMultiset::default();
            for (&k, &v) in m {
                out.insert((format!("s{k}"), if k % 2 == 0 { Status::On } else { Status::Off }), v);
            }
            out
        };
        let expand = |m: &BTreeMap<u8, u32>| m.iter().flat_map(|(&k, &v)| std::iter::repeat_n(k, v as usize)).collect::<Vec<_>>();
        let (a, b) = (expand(&gt), expand(&pred));
        let (mut i, mut j, mut matched) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Equal => { matched += 1; i += 1; j += 1; }
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
            }
        }
        let r = multiset_prf(&to_ms(&gt), &to_ms(&pred)).unwrap();
        prop_assert!((r.precision - matched as f64 / b.len() as f64).abs() < 1e-12);
        prop_assert!((r.recall - matched as f64 / a.len() as f64).abs() < 1e-12);
    }
}
