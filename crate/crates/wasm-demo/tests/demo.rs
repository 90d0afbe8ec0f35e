use psm_wasm::{cost_curves, counter_timeline, parenthesization};

#[test]
fn timeline_follows_binary_counter() {
    let steps = counter_timeline(13).unwrap();
    assert_eq!(steps.len(), 13);
    for s in &steps {
        let m = s.t + 1;
        let occupied = s.slots.iter().filter(|b| **b).count() as u32;
        assert_eq!(occupied, m.count_ones());
        for (k, b) in s.slots.iter().enumerate() {
            assert_eq!(*b, m >> k & 1 == 1);
        }
    }
    assert_eq!(steps.iter().map(|s| s.insert_calls).sum::<u64>(), 13 - 3);
    assert!(counter_timeline(0).is_err());
}

#[test]
fn cost_curves_sampled_and_growing() {
    let pts = cost_curves(4, 32, 4096).unwrap();
    assert!(pts.len() <= 513);
    assert_eq!(pts.last().unwrap().t, 4096);
    assert!(pts.windows(2).all(|w| w[1].baseline > w[0].baseline));
    assert!(cost_curves(4, 0, 10).is_err());
}

#[test]
fn parenthesization_agrees() {
    let rows = parenthesization(8).unwrap();
    assert!(rows.iter().all(|r| r.equal));
    assert_eq!(rows[6].tree, "((((x0·x1)·(x2·x3))·(x4·x5))·x6)");
    assert_eq!(rows[7].tree, "(((x0·x1)·(x2·x3))·((x4·x5)·(x6·x7)))");
    assert!(parenthesization(6).is_err());
}
