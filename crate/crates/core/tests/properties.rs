//! Property tests over the public API.

use edgeshift::density::{density_loss, local_edge_density};
use edgeshift::field::{normalized_magnitude, sample_array, sample_with_field, unmatched_mask};
use edgeshift::matching::{min_distance_match, shift_statistics};
use edgeshift::morph::thin;
use edgeshift::training::select_warmup_series;
use edgeshift::{DisplacementField, EdgeProbMap};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn grid(h: usize, w: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

fn field_and_input() -> impl Strategy<Value = (DisplacementField<f64>, Array3<f64>)> {
    (2usize..9, 2usize..9, 1usize..3).prop_flat_map(|(h, w, c)| {
        (
            grid(h, w, -3.0, 3.0),
            grid(h, w, -3.0, 3.0),
            prop::collection::vec(0.0f64..1.0, c * h * w),
        )
            .prop_map(move |(a, b, v)| {
                (
                    DisplacementField::new(a, b).unwrap(),
                    Array3::from_shape_vec((c, h, w), v).unwrap(),
                )
            })
    })
}

fn binary(h: usize, w: usize, p: f64) -> impl Strategy<Value = Array2<u8>> {
    prop::collection::vec(prop::bool::weighted(p), h * w)
        .prop_map(move |v| Array2::from_shape_vec((h, w), v.into_iter().map(u8::from).collect()).unwrap())
}

proptest! {
    #[test]
    fn zero_field_is_exact_identity((_, input) in field_and_input()) {
        let (h, w) = (input.shape()[1], input.shape()[2]);
        let out = sample_array(&input, &DisplacementField::zeros(h, w)).unwrap();
        prop_assert_eq!(out, input);
    }

    #[test]
    fn sampling_stays_within_input_range((field, input) in field_and_input()) {
        let out = sample_array(&input, &field).unwrap();
        for k in 0..input.shape()[0] {
            let plane = input.index_axis(ndarray::Axis(0), k);
            let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in out.index_axis(ndarray::Axis(0), k) {
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn probability_maps_stay_probabilities((field, input) in field_and_input()) {
        let out = sample_with_field(&EdgeProbMap::new(input).unwrap(), &field).unwrap();
        prop_assert!(out.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn unmatched_pixels_have_no_footprint((field, _) in field_and_input()) {
        let (h, w) = field.shape();
        // Brute force: push a unit impulse through the sampler from every
        // source pixel and see whether any output reads it.
        let mask = unmatched_mask(&field);
        for si in 0..h {
            for sj in 0..w {
                let mut impulse = Array3::zeros((1, h, w));
                impulse[[0, si, sj]] = 1.0;
                let read = sample_array(&impulse, &field).unwrap().iter().any(|v| *v > 1e-6);
                prop_assert_eq!(mask.mask()[[si, sj]], !read, "pixel ({}, {})", si, sj);
            }
        }
    }

    #[test]
    fn normalized_magnitude_in_unit_range((field, _) in field_and_input()) {
        let d = normalized_magnitude(&field);
        prop_assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
        if field.magnitude().iter().any(|m| *m > 0.0) {
            prop_assert!(d.iter().any(|v| *v == 1.0));
        }
    }

    #[test]
    fn density_loss_is_symmetric(d in grid(5, 6, 0.0, 1.0), c in grid(5, 6, 0.0, 1.0)) {
        let a = density_loss(&d, &c).unwrap();
        prop_assert_eq!(a, density_loss(&c, &d).unwrap());
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn density_is_monotone(edges in binary(9, 9, 0.2), i in 0usize..9, j in 0usize..9, n in prop::sample::select(vec![3usize, 5, 7])) {
        let before = local_edge_density::<f64>(edges.view(), n).unwrap();
        let mut more = edges.clone();
        more[[i, j]] = 1;
        let after = local_edge_density::<f64>(more.view(), n).unwrap();
        for (a, b) in after.values().iter().zip(before.values()) {
            prop_assert!(*a >= *b);
        }
    }

    #[test]
    fn nearest_match_equals_brute_force(target in binary(12, 12, 0.08), sources in prop::collection::vec((0usize..12, 0usize..12), 1..20), r in 1.0f64..8.0) {
        let got = min_distance_match(&sources, target.view(), r).unwrap();
        let mut expected = Vec::new();
        for &(si, sj) in &sources {
            let mut best: Option<(i64, (usize, usize))> = None;
            for ((ti, tj), v) in target.indexed_iter() {
                let d = (ti as i64 - si as i64).pow(2) + (tj as i64 - sj as i64).pow(2);
                if *v == 1 && (d as f64) <= r * r && best.map_or(true, |b| d < b.0) {
                    best = Some((d, (ti, tj)));
                }
            }
            if let Some((_, t)) = best {
                expected.push(((si, sj), t));
            }
        }
        let got: Vec<_> = got.iter().map(|m| (m.source, m.target())).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn shift_fractions_are_fractions(shifts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..50), t in 0.0f64..6.0) {
        let h = shift_statistics(&shifts).unwrap();
        let f = h.fraction_gt(t);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(h.total(), shifts.len());
    }

    #[test]
    fn thinning_is_idempotent_and_shrinks(edges in binary(10, 10, 0.4)) {
        let once = thin(edges.view());
        prop_assert!(once.iter().zip(edges.iter()).all(|(a, b)| *a <= *b));
        prop_assert_eq!(thin(once.view()), once);
    }

    #[test]
    fn warmup_selection_returns_a_curve_epoch(values in prop::collection::vec(0.0f64..1.0, 5..40)) {
        let series: Vec<(usize, f64)> = values.iter().enumerate().map(|(n, v)| (n + 1, *v)).collect();
        let e = select_warmup_series(&series).unwrap();
        prop_assert!(series.iter().any(|p| p.0 == e));
        prop_assert_eq!(e, select_warmup_series(&series).unwrap());
    }
}
