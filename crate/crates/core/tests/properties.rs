use ndarray::{arr2, Array2};
use proptest::prelude::*;

use dpms::diffmath::{kl_gamma_value, Tape};
use dpms::distributions::BoundedTransform;
use dpms::shbf::GridLayout;

fn kl_normal(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let mut tape = Tape::new();
    let v = [mq, sq, mp, sp].map(|x| tape.constant(arr2(&[[x]])));
    let kl = tape.kl_normal(v[0], v[1], v[2], v[3]);
    tape.scalar_value(kl)
}

fn overlap() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), Just(0.5), Just(2.0 / 3.0), Just(0.75)]
}

fn layout() -> impl Strategy<Value = GridLayout> {
    (1usize..=3)
        .prop_flat_map(|r| {
            (
                prop::collection::vec((-5.0..5.0f64, 0.1..10.0f64), r),
                prop::collection::vec(4usize..9, r),
                prop::collection::vec(overlap(), r),
            )
        })
        .prop_map(|(box_, tiles, overlap)| {
            let lo = box_.iter().map(|b| b.0).collect();
            let hi = box_.iter().map(|b| b.0 + b.1).collect();
            GridLayout::new(lo, hi, tiles, overlap).unwrap()
        })
}

proptest! {
    #[test]
    fn every_point_has_constant_membership(layout in layout(), u in prop::collection::vec(0.0..=1.0f64, 3)) {
        let point: Vec<f64> = (0..layout.dims())
            .map(|d| layout.lo[d] + u[d] * (layout.hi[d] - layout.lo[d]))
            .collect();
        let mut tiles = layout.membership(&point).unwrap();
        prop_assert_eq!(tiles.len(), layout.cardinality());
        tiles.sort_unstable();
        tiles.dedup();
        prop_assert_eq!(tiles.len(), layout.cardinality());
        for flat in tiles {
            let mut rem = flat;
            for d in (0..layout.dims()).rev() {
                let j = rem % layout.tiles[d];
                rem /= layout.tiles[d];
                let (lead, trail) = layout.tile_interval(d, j);
                let slack = 1e-9 * layout.stride(d);
                prop_assert!(point[d] >= lead - slack && point[d] <= trail + slack);
            }
        }
    }

    #[test]
    fn gaussian_kl_is_nonnegative_and_zero_on_identity(
        mq in -10.0..10.0f64, sq in 1e-3..10.0f64, mp in -10.0..10.0f64, sp in 1e-3..10.0f64,
    ) {
        prop_assert!(kl_normal(mq, sq, mp, sp) >= 0.0);
        prop_assert_eq!(kl_normal(mq, sq, mq, sq), 0.0);
    }

    #[test]
    fn gamma_kl_is_nonnegative_and_zero_on_identity(
        aq in 0.5..100.0f64, bq in 0.1..100.0f64, ap in 0.5..100.0f64, bp in 0.1..100.0f64,
    ) {
        prop_assert!(kl_gamma_value(aq, bq, ap, bp) >= -1e-12);
        prop_assert!(kl_gamma_value(aq, bq, aq, bq).abs() <= 1e-12);
    }

    #[test]
    fn bounded_transform_round_trips(lo in 1e-4..1.0f64, width in 1.5..1e3f64, raw in -3.0..3.0f64) {
        let t = BoundedTransform::new(lo, lo * width).unwrap();
        let y = t.forward(raw);
        prop_assert!(y >= t.lo && y <= t.hi);
        let back = t.inverse(y).unwrap();
        prop_assert!((back - raw).abs() <= 1e-8 * (1.0 + raw.abs()));
        let exact = t.inverse_exact(y).unwrap();
        prop_assert_eq!(t.forward(exact), y);
    }

    #[test]
    fn bounded_transform_is_monotone(lo in 1e-4..1.0f64, width in 1.5..1e3f64, a in -4.0..4.0f64, b in -4.0..4.0f64) {
        let t = BoundedTransform::new(lo, lo * width).unwrap();
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(t.forward(a) <= t.forward(b));
    }

    #[test]
    fn lattice_points_stay_in_box(layout in layout(), k in 1usize..5) {
        let pts: Array2<f64> = layout.lattice(k);
        prop_assert_eq!(pts.nrows(), k.pow(layout.dims() as u32));
        for p in pts.rows() {
            for d in 0..layout.dims() {
                prop_assert!(p[d] > layout.lo[d] && p[d] < layout.hi[d]);
            }
        }
        let m = layout.memberships(&pts).unwrap();
        prop_assert_eq!(m.clamped, 0);
        prop_assert_eq!(m.indices.len(), pts.nrows() * layout.cardinality());
    }
}
