mod common;

use ndarray::{Array3, Array4, Array5};
use proptest::prelude::*;
use rsd::geometry::{compute_bev_mask, lift_bev_to_pillar, BevGrid, BevMask, ProjectedPoints2D};
use rsd::metrics::{intersects, separation, OrientedRect};
use rsd::rebatch::{extract_visible, rebatch, scatter_back};
use rsd::riskhead::{bilinear_sample, FeatureMap};
use rand::SeedableRng;

fn rect() -> impl Strategy<Value = OrientedRect> {
    (-5.0..5.0f64, -5.0..5.0f64, 0.1..5.0f64, 0.1..3.0f64, -4.0..4.0f64)
        .prop_map(|(x, y, l, w, yaw)| OrientedRect::new([x, y], l, w, yaw))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn sat_agrees_with_witness_points(a in rect(), b in rect()) {
        let sep = separation(&a, &b);
        prop_assume!(sep.abs() > 1e-9);
        prop_assert_eq!(intersects(&a, &b), common::rects_overlap_oracle(&a, &b, 1e-12));
        prop_assert_eq!(intersects(&a, &b), intersects(&b, &a));
    }

    #[test]
    fn bilinear_matches_oracle(h in 1usize..6, w in 1usize..6, x in -0.3..1.3f64, y in -0.3..1.3f64, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let map = Array3::from_shape_fn((h, w, 3), |_| rng.random_range(-1.0..1.0));
        let got = bilinear_sample(&FeatureMap::new(map.clone()), (x, y));
        let want = common::bilinear_oracle(&map, (x, y));
        for (g, o) in got.iter().zip(&want) {
            prop_assert!((g - o).abs() <= 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn scatter_inverts_rebatch(
        n_cam in 1usize..4, n_bev in 1usize..40, depth in 1usize..3,
        bits in proptest::collection::vec(any::<bool>(), 240),
    ) {
        let visible = Array4::from_shape_fn((1, n_cam, n_bev, depth), |(_, k, q, d)| bits[(k * 40 + q) * 2 % 240 + d]);
        let mask = BevMask { visible };
        let proj = ProjectedPoints2D {
            coords: Array5::from_shape_fn((1, n_cam, n_bev, depth, 2), |(_, k, q, d, c)| (k + q + d + c) as f64),
            depth: Array4::ones((1, n_cam, n_bev, depth)),
        };
        let queries = Array3::from_shape_fn((1, n_bev, 2), |(_, q, c)| (q * 2 + c) as f64 + 1.0);
        let idx = extract_visible(&mask);
        let rb = rebatch(&queries, &proj, &idx).unwrap();
        prop_assert_eq!(rb.bev_prime.shape()[2], idx.l_max);
        let back = scatter_back(&rb, &idx, n_bev).unwrap();
        for k in 0..n_cam {
            for q in 0..n_bev {
                let seen = (0..depth).any(|d| mask.visible[[0, k, q, d]]);
                for c in 0..2 {
                    prop_assert_eq!(back[[0, k, q, c]], if seen { queries[[0, q, c]] } else { 0.0 });
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mask_matches_oracle_on_small_grids(seed in any::<u64>(), rows in 1usize..20, cols in 1usize..20, z in 1usize..5) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rig = common::random_rig(&mut rng);
        let grid = BevGrid { rows, cols, z_samples: z, ..BevGrid::default() };
        let (_, mask) = compute_bev_mask(&grid, &lift_bev_to_pillar(&grid), std::slice::from_ref(&rig), 1e-5).unwrap();
        let oracle = common::mask_oracle(&grid, &rig, 1e-5);
        for k in 0..rig.len() {
            for q in 0..grid.n_bev() {
                for d in 0..z {
                    prop_assert_eq!(mask.visible[[0, k, q, d]], oracle.visible[k][q][d]);
                }
            }
        }
    }
}
