use std::collections::HashSet;

use pointssm_core::geometry::Point;
use pointssm_core::serialization::{
    hilbert_index, hilbert_point, locality_score, quantize_to_grid, serialize, transpose_axes,
    z_index, CurveKind,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cells(bits: u32) -> impl Iterator<Item = [u32; 3]> {
    let s = 1u32 << bits;
    (0..s).flat_map(move |x| (0..s).flat_map(move |y| (0..s).map(move |z| [x, y, z])))
}

fn l1(a: [u32; 3], b: [u32; 3]) -> u32 {
    (0..3).map(|i| a[i].abs_diff(b[i])).sum()
}

fn uniform_cloud(n: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect()
}

/// Bit-by-bit interleave, written independently of the library loop.
fn morton_oracle(c: [u32; 3], bits: u32) -> u64 {
    let mut code = 0u64;
    for b in 0..bits {
        code |= u64::from((c[0] >> b) & 1) << (3 * b + 2);
        code |= u64::from((c[1] >> b) & 1) << (3 * b + 1);
        code |= u64::from((c[2] >> b) & 1) << (3 * b);
    }
    code
}

#[test]
fn encoders_are_bijections_up_to_four_bits() {
    for bits in 1..=4 {
        let total = 1usize << (3 * bits);
        let h: HashSet<u64> = cells(bits)
            .map(|c| hilbert_index(c, bits).unwrap())
            .collect();
        let z: HashSet<u64> = cells(bits).map(|c| z_index(c, bits).unwrap()).collect();
        assert_eq!(h.len(), total);
        assert_eq!(z.len(), total);
        assert!(h.iter().chain(&z).all(|&i| i < total as u64));
    }
}

#[test]
fn hilbert_consecutive_ranks_are_adjacent() {
    for bits in 1..=4 {
        let mut by_rank = vec![[0u32; 3]; 1 << (3 * bits)];
        for c in cells(bits) {
            by_rank[hilbert_index(c, bits).unwrap() as usize] = c;
        }
        assert!(
            by_rank.windows(2).all(|w| l1(w[0], w[1]) == 1),
            "bits {bits}"
        );
    }
}

#[test]
fn hilbert_round_trip() {
    for c in cells(3) {
        assert_eq!(hilbert_point(hilbert_index(c, 3).unwrap(), 3).unwrap(), c);
    }
    for i in 0..(1u64 << 12) {
        assert_eq!(hilbert_index(hilbert_point(i, 4).unwrap(), 4).unwrap(), i);
    }
    assert!(hilbert_index([2, 0, 0], 1).is_err());
}

#[test]
fn morton_matches_per_bit_oracle() {
    for c in cells(3) {
        assert_eq!(z_index(c, 3).unwrap(), morton_oracle(c, 3));
    }
    assert_eq!(z_index([2, 1, 3], 2).unwrap(), morton_oracle([2, 1, 3], 2));
}

#[test]
fn points_along_the_unit_hilbert_path_keep_their_order() {
    let mut path = vec![[0u32; 3]; 8];
    for c in cells(1) {
        path[hilbert_index(c, 1).unwrap() as usize] = c;
    }
    let pts: Vec<Point> = path.iter().map(|c| c.map(f64::from)).collect();
    assert_eq!(
        serialize(&pts, CurveKind::Hilbert, 1).unwrap().order,
        (0..8).collect::<Vec<_>>()
    );
    assert_eq!(
        serialize(&pts[..1], CurveKind::TransZOrder, 9)
            .unwrap()
            .order,
        vec![0]
    );
}

#[test]
fn hilbert_and_trans_hilbert_differ() {
    let pts = uniform_cloud(64, 11);
    let a = serialize(&pts, CurveKind::Hilbert, 9).unwrap();
    let b = serialize(&pts, CurveKind::TransHilbert, 9).unwrap();
    assert_ne!(a.order, b.order);
}

#[test]
fn random_curve_is_reproducible() {
    let pts = uniform_cloud(50, 2);
    let a = serialize(&pts, CurveKind::Random(7), 9).unwrap();
    assert_eq!(a, serialize(&pts, CurveKind::Random(7), 9).unwrap());
    assert_ne!(
        a.order,
        serialize(&pts, CurveKind::Random(8), 9).unwrap().order
    );
}

#[test]
fn locality_examples() {
    let line: Vec<Point> = (0..5).map(|i| [i as f64 * 0.5, 0.0, 0.0]).collect();
    let ident = pointssm_core::serialization::SerializedOrder {
        order: (0..5).collect(),
        curve: CurveKind::Hilbert,
        grid_bits: 9,
    };
    assert!((locality_score(&ident, &line).unwrap() - 0.5).abs() < 1e-15);
    let dup = vec![[1.0, 2.0, 3.0]; 4];
    let ident4 = pointssm_core::serialization::SerializedOrder {
        order: (0..4).collect(),
        ..ident.clone()
    };
    assert_eq!(locality_score(&ident4, &dup).unwrap(), 0.0);
    assert!(locality_score(
        &serialize(&line[..1], CurveKind::Hilbert, 9).unwrap(),
        &line[..1]
    )
    .is_err());
}

#[test]
fn hilbert_beats_zorder_beats_random() {
    let (mut hz, mut zr, mut hr) = (0, 0, 0);
    for seed in 0..20 {
        let pts = uniform_cloud(256, 100 + seed);
        let score = |c| locality_score(&serialize(&pts, c, 9).unwrap(), &pts).unwrap();
        let (h, z, r) = (
            score(CurveKind::Hilbert),
            score(CurveKind::ZOrder),
            score(CurveKind::Random(seed)),
        );
        hz += usize::from(h <= z);
        zr += usize::from(z <= r);
        hr += usize::from(h < r);
    }
    assert!(hr >= 19, "{hr}");
    assert!(hz > 10 && zr > 10, "{hz} {zr}");
}

proptest! {
    #[test]
    fn serialize_is_a_permutation(
        pts in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..80),
        bits in 1u32..=12,
        which in 0usize..5,
    ) {
        let curve = [CurveKind::Hilbert, CurveKind::TransHilbert, CurveKind::ZOrder, CurveKind::TransZOrder, CurveKind::Random(3)][which];
        let s = serialize(&pts, curve, bits).unwrap();
        let mut sorted = s.order.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..pts.len()).collect::<Vec<_>>());
        prop_assert_eq!(&s, &serialize(&pts, curve, bits).unwrap());
    }

    #[test]
    fn quantized_cells_in_range(pts in prop::collection::vec(prop::array::uniform3(-1e3f64..1e3), 1..50), bits in 1u32..=20) {
        for c in quantize_to_grid(&pts, bits).unwrap() {
            prop_assert!(c.iter().all(|&v| v < (1 << bits)));
        }
    }

    #[test]
    fn transpose_has_order_three(c in prop::array::uniform3(0u32..1000)) {
        prop_assert_eq!(transpose_axes(transpose_axes(transpose_axes(c))), c);
    }
}
