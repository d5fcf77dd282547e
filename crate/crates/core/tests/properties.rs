use std::f64::consts::{PI, TAU};
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use proptest::prelude::*;

use sscnn::checkpoint::{config_to_text, parse_config};
use sscnn::convengine::{max_across_scales, xcorr2, Padding};
use sscnn::datasets::{encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels, LabeledImageSet};
use sscnn::filterbank::{angular_distance, BasisSpec};
use sscnn::network::{Network, NetworkConfig};
use sscnn::render::{parse_pgm, render_grid, Normalize};
use sscnn::steering::{oracle_resample, steer, steered_size, CoefficientSet};

fn coeffs(values: Vec<(f64, f64)>) -> CoefficientSet {
    let c = values.into_iter().map(|(re, im)| Complex64::new(re, im)).collect();
    CoefficientSet::new(BasisSpec::default(), c).unwrap()
}

fn coeff_strategy() -> impl Strategy<Value = CoefficientSet> {
    prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 24).prop_map(coeffs)
}

fn grid(h: usize, w: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-1.0..1.0f64, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn angular_distance_is_a_bounded_periodic_metric(a in -20.0..20.0f64, b in -20.0..20.0f64, n in -3i32..3) {
        let d = angular_distance(a, b);
        prop_assert!((0.0..=PI + 1e-12).contains(&d));
        prop_assert!((d - angular_distance(b, a)).abs() < 1e-12);
        prop_assert!((d - angular_distance(a + n as f64 * TAU, b)).abs() < 1e-9);
    }

    #[test]
    fn steering_is_linear(c1 in coeff_strategy(), c2 in coeff_strategy(), alpha in -3.0..3.0f64, s in 0.5..2.6f64) {
        let mixed = coeffs(c1.c.iter().zip(&c2.c).map(|(a, b)| { let z = a * alpha + b; (z.re, z.im) }).collect());
        let lhs = steer(&mixed, s, 7).unwrap().values;
        let a = steer(&c1, s, 7).unwrap().values;
        let b = steer(&c2, s, 7).unwrap().values;
        let peak = lhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for ((l, x), y) in lhs.iter().zip(&a).zip(&b) {
            prop_assert!((l - (alpha * x + y)).abs() <= 1e-12 * peak);
        }
    }

    #[test]
    fn steering_matches_direct_resampling(c in coeff_strategy(), s in 0.4..3.0f64) {
        let k = steer(&c, s, 7).unwrap();
        let o = oracle_resample(&c, s, 7).unwrap();
        prop_assert_eq!(k.size, steered_size(7, s).unwrap());
        let peak = o.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in k.values.iter().zip(&o) {
            prop_assert!((a - b).abs() < 1e-10 * peak);
        }
    }

    #[test]
    fn steered_size_is_odd_and_nearest(base in (0usize..6).prop_map(|h| 2 * h + 1), s in 0.2..4.0f64) {
        let n = steered_size(base, s).unwrap();
        prop_assert_eq!(n % 2, 1);
        let target = base as f64 * s;
        prop_assert!((n as f64 - target).abs() <= 1.0 + 1e-9);
    }

    #[test]
    fn correlation_is_linear_in_the_kernel(img in grid(6, 9), k1 in grid(3, 3), k2 in grid(3, 3)) {
        let sum = &k1 + &k2;
        let lhs = xcorr2(&img, &sum, Padding::Same).unwrap();
        let rhs = xcorr2(&img, &k1, Padding::Same).unwrap() + xcorr2(&img, &k2, Padding::Same).unwrap();
        for (a, b) in lhs.iter().zip(&rhs) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_scale_max_is_consistent_and_monotone(maps in prop::collection::vec(grid(4, 5), 1..5), extra in grid(4, 5)) {
        let (pooled, arg) = max_across_scales(&maps);
        for ((p, &a), idx) in pooled.iter().zip(&arg).zip(pooled.indexed_iter().map(|(i, _)| i)) {
            prop_assert_eq!(*p, maps[a][idx]);
            prop_assert!(maps.iter().all(|m| m[idx] <= *p));
            prop_assert!(maps[..a].iter().all(|m| m[idx] < *p));
        }
        let mut more = maps.clone();
        more.push(extra);
        let (bigger, _) = max_across_scales(&more);
        prop_assert!(bigger.iter().zip(&pooled).all(|(b, p)| b >= p));
    }

    #[test]
    fn idx_round_trip_is_exact(bytes in prop::collection::vec(any::<u8>(), 0..6 * 4 * 3), labels in prop::collection::vec(0u8..10, 6)) {
        let n = bytes.len() / 12;
        let images: Vec<Array2<f64>> = (0..n)
            .map(|i| Array2::from_shape_fn((4, 3), |(y, x)| bytes[i * 12 + y * 3 + x] as f64 / 255.0))
            .collect();
        let set = LabeledImageSet::new(images, labels[..n].to_vec(), 4, 3).unwrap();
        let (count, rows, cols, pixels) = parse_idx_images(&encode_idx_images(&set), Path::new("mem")).unwrap();
        prop_assert_eq!((count, rows, cols), (n, 4, 3));
        prop_assert_eq!(&pixels[..], &bytes[..n * 12]);
        prop_assert_eq!(parse_idx_labels(&encode_idx_labels(&set), Path::new("mem")).unwrap(), labels[..n].to_vec());
    }

    #[test]
    fn montage_size_is_fixed_by_layout(rows in 1usize..4, cols in 1usize..5, h in 1usize..6, w in 1usize..6) {
        let tiles: Vec<Array2<f64>> = (0..rows * cols).map(|i| Array2::from_elem((h, w), i as f64)).collect();
        let pgm = render_grid(&tiles, (rows, cols), Normalize::Global).unwrap();
        let img = parse_pgm(&pgm, Path::new("mem")).unwrap();
        prop_assert_eq!(img.dim(), (rows * h + rows - 1, cols * w + cols - 1));
    }

    #[test]
    fn config_text_round_trips(widths in prop::collection::vec(1usize..9, 1..4), lr in 0.0..1.0f64, seed in any::<u64>()) {
        let cfg = NetworkConfig {
            spatial_pool_sizes: vec![2; widths.len()],
            channel_widths: widths,
            learning_rate: lr,
            seed,
            ..NetworkConfig::desk()
        };
        let back = parse_config(&config_to_text(&cfg), Path::new("mem"), NetworkConfig::default()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn parameters_flatten_and_restore(seed in any::<u64>(), shift in -1.0..1.0f64) {
        let cfg = NetworkConfig {
            input_height: 6,
            input_width: 6,
            channel_widths: vec![2, 2],
            spatial_pool_sizes: vec![2, 2],
            dense_widths: vec![3],
            seed,
            ..NetworkConfig::desk()
        };
        let net = Network::new(cfg).unwrap();
        let mut state = net.init_state();
        let flat: Vec<f64> = state.params().to_flat().iter().map(|v| v + shift).collect();
        state.params_mut().set_flat(&flat).unwrap();
        prop_assert_eq!(state.params().to_flat(), flat);
    }
}
