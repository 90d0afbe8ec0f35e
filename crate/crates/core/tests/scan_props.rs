use proptest::prelude::*;

use psm_core::scan::{
    blelloch, blelloch_par, floor_log2, scan_online, verify_duality, Aggregator, ExprAgg, FnAggregator,
    HashMixAgg, SubAgg,
};

/// Recursive evaluation of the balanced tree over `xs[lo..hi]`.
fn tree(xs: &[f64], lo: usize, hi: usize) -> f64 {
    if hi - lo == 1 {
        return xs[lo];
    }
    let mid = (lo + hi) / 2;
    SubAgg.combine(&tree(xs, lo, mid), &tree(xs, mid, hi))
}

/// Exclusive prefix `i` as the left-to-right fold of maximal aligned blocks.
fn prefix_oracle(xs: &[f64], i: usize) -> Option<f64> {
    let mut acc: Option<f64> = None;
    let mut start = 0;
    for bit in (0..usize::BITS).rev() {
        let size = 1usize << bit;
        if i & size != 0 {
            let block = tree(xs, start, start + size);
            acc = Some(match acc {
                None => block,
                Some(a) => SubAgg.combine(&a, &block),
            });
            start += size;
        }
    }
    acc
}

fn pow2_vec() -> impl Strategy<Value = Vec<f64>> {
    (0u32..8).prop_flat_map(|k| prop::collection::vec(-1e3f64..1e3, 1usize << k))
}

proptest! {
    #[test]
    fn static_prefixes_match_block_oracle(xs in pow2_vec()) {
        let st = blelloch(&xs, &SubAgg).unwrap();
        prop_assert!(st.prefixes[0].is_identity());
        for i in 1..xs.len() {
            prop_assert_eq!(st.prefixes[i].value().map(|v| v.to_bits()), prefix_oracle(&xs, i).map(f64::to_bits));
        }
        prop_assert_eq!(st.total.to_bits(), tree(&xs, 0, xs.len()).to_bits());
        // upsweep n - 1, downsweep skips the left spine
        let n = xs.len();
        prop_assert_eq!(st.agg_calls as usize, 2 * (n - 1) - n.trailing_zeros() as usize);
    }

    #[test]
    fn parallel_static_scan_is_bitwise_serial(xs in pow2_vec()) {
        let a = blelloch(&xs, &SubAgg).unwrap();
        let b = blelloch_par(&xs, &SubAgg).unwrap();
        prop_assert_eq!(a.total.to_bits(), b.total.to_bits());
        for (p, q) in a.prefixes.iter().zip(&b.prefixes) {
            prop_assert_eq!(p.value().map(|v| v.to_bits()), q.value().map(|v| v.to_bits()));
        }
    }

    #[test]
    fn online_equals_static_for_non_associative_ops(xs in pow2_vec(), seed in any::<u64>()) {
        let report = verify_duality(&xs, &SubAgg).unwrap();
        prop_assert_eq!(report.mismatches(), 0);
        let hashed: Vec<u64> = xs.iter().map(|v| v.to_bits() ^ seed).collect();
        prop_assert!(verify_duality(&hashed, &HashMixAgg).unwrap().all_pass());
        let names: Vec<String> = (0..xs.len()).map(|i| format!("x{i}")).collect();
        prop_assert_eq!(verify_duality(&names, &ExprAgg).unwrap().mismatches(), 0);
    }

    #[test]
    fn counter_tracks_binary_representation(n in 1usize..3000) {
        let count = FnAggregator::new(|a: &u64, b: &u64| a + b, true);
        let (emitted, trace) = scan_online(std::iter::repeat_n(1u64, n), &count);
        for (t, (e, cost)) in emitted.iter().zip(&trace.per_element).enumerate() {
            let m = t as u64 + 1;
            prop_assert_eq!(*e, m);
            prop_assert_eq!(cost.occupied_roots, m.count_ones() as usize);
            prop_assert_eq!(cost.insert_calls, (t as u64 + 1).trailing_zeros() as u64);
            prop_assert_eq!(cost.emit_calls, m.count_ones() as u64 - 1);
            prop_assert!(cost.emit_calls <= floor_log2(m) as u64);
        }
        prop_assert_eq!(trace.insert_agg_calls, n as u64 - (n as u64).count_ones() as u64);
    }

    #[test]
    fn trace_csv_has_one_row_per_element(n in 1usize..200) {
        let (_, trace) = scan_online(vec![0.0f64; n], &SubAgg);
        let csv = trace.to_csv();
        prop_assert_eq!(csv.lines().count(), n + 1);
    }
}
