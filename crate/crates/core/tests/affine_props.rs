use proptest::prelude::*;

use psm_core::affine::{
    affine_combine, make_layer_pairs, random_inputs, scan_affine_states, sequential_affine, AffinePair, LayerConfig,
    LayerKind, ScanPath, Transition,
};
use psm_core::tensor::{seeded_init, Matrix};

fn pair(kind: u8, seed: u64) -> AffinePair {
    let f = seeded_init(3, 3, seed, 1.0);
    let e = match kind {
        0 => Transition::Identity,
        1 => Transition::Scalar(seeded_init(1, 1, seed + 1, 1.0).get(0, 0)),
        2 => Transition::Diagonal(seeded_init(3, 3, seed + 1, 1.0)),
        3 => Transition::Left(seeded_init(3, 3, seed + 1, 1.0)),
        _ => Transition::Right(seeded_init(3, 3, seed + 1, 1.0)),
    };
    AffinePair::new(e, f)
}

fn apply(p: &AffinePair, s: &Matrix) -> Matrix {
    p.e.act(s).unwrap().add(&p.f).unwrap()
}

proptest! {
    #[test]
    fn combine_is_associative(kind in 0u8..5, seed in 0u64..1_000_000) {
        let (p1, p2, p3) = (pair(kind, seed), pair(kind, seed + 10), pair(kind, seed + 20));
        let a = affine_combine(&affine_combine(&p3, &p2).unwrap(), &p1).unwrap();
        let b = affine_combine(&p3, &affine_combine(&p2, &p1).unwrap()).unwrap();
        prop_assert!(a.f.rel_err(&b.f) <= 1e-9);
        let s = seeded_init(3, 3, seed + 30, 1.0);
        prop_assert!(apply(&a, &s).rel_err(&apply(&b, &s)) <= 1e-9);
    }

    #[test]
    fn combined_pair_acts_like_two_steps(kind in 0u8..5, seed in 0u64..1_000_000) {
        let (p1, p2) = (pair(kind, seed), pair(kind, seed + 10));
        let s = seeded_init(3, 3, seed + 30, 1.0);
        let two_steps = apply(&p2, &apply(&p1, &s));
        let joint = apply(&affine_combine(&p2, &p1).unwrap(), &s);
        prop_assert!(joint.rel_err(&two_steps) <= 1e-12);
    }

    #[test]
    fn identity_pair_is_neutral(kind in 0u8..5, seed in 0u64..1_000_000) {
        let p = pair(kind, seed);
        let e = AffinePair::identity(3, 3);
        prop_assert_eq!(&affine_combine(&p, &e).unwrap(), &p);
        prop_assert_eq!(&affine_combine(&e, &p).unwrap(), &p);
    }

    #[test]
    fn every_layer_scans_like_its_recurrence(k in 0usize..10, n in 1usize..40, seed in 0u64..1000) {
        let cfg = LayerConfig::new(LayerKind::ALL[k], 4);
        let w = cfg.init_weights(seed);
        let pairs = make_layer_pairs(&cfg, &random_inputs(n, 4, seed + 1), &w).unwrap();
        prop_assert!(pairs.iter().all(|p| p.e.kind() == cfg.kind.transition_kind()));
        let want = sequential_affine(&pairs).unwrap();
        for path in [ScanPath::Static, ScanPath::Online] {
            let got = scan_affine_states(pairs.clone(), path).unwrap();
            prop_assert_eq!(got.len(), n);
            for (g, r) in got.iter().zip(&want) {
                prop_assert!(g.rel_err(r) <= 1e-9);
            }
        }
    }
}
