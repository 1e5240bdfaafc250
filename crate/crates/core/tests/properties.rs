//! Property tests for the type invariants of each module.

use membrane_twin::geometry::{bend, delta_z, indent, to_pointcloud, FieldConfig, IndenterSampler, MAX_ABS_HEIGHT_MM};
use membrane_twin::importance::{check_partition, led_groups, pd_groups};
use membrane_twin::model::{Autoencoder, AutoencoderArch};
use membrane_twin::optics::{default_layout, scan, OpticsParams};
use membrane_twin::readout::{digitize, fit_norm, normalize, preprocess, ADC_MAX, STD_FLOOR};
use membrane_twin::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sampled_field(grid: usize, seed: u64) -> (membrane_twin::geometry::DeformationField, f64) {
    let config = FieldConfig::with_grid(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indenter = IndenterSampler::default().sample(config.extent_mm, &mut rng).unwrap();
    let depth = indenter.depth_mm;
    (indent(&config, &indenter).unwrap(), depth)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn indented_fields_are_clamped_finite_and_bounded(grid in 16usize..40, seed in any::<u64>()) {
        let (field, depth) = sampled_field(grid, seed);
        field.validate().unwrap();
        let g = field.grid();
        for k in 0..g {
            for (r, c) in [(0, k), (g - 1, k), (k, 0), (k, g - 1)] {
                prop_assert!(field.height(r, c).abs() < 1e-9);
            }
        }
        let heights = field.heights();
        prop_assert!(heights.iter().all(|z| z.is_finite()));
        prop_assert!(field.max_abs_height() <= MAX_ABS_HEIGHT_MM);
        // the membrane never sinks below the commanded depth
        prop_assert!(heights.iter().all(|&z| z >= -depth - 1e-9));
    }

    #[test]
    fn stride_clouds_are_square_and_match_delta_z(grid in 16usize..40, stride in 1usize..5, seed in any::<u64>()) {
        let (field, _) = sampled_field(grid, seed);
        let cloud = to_pointcloud(&field, stride).unwrap();
        let side = (cloud.len() as f64).sqrt().round() as usize;
        prop_assert_eq!(side * side, cloud.len());
        prop_assert!(cloud.points().iter().all(|p| p.iter().all(|v| v.is_finite())));
        let zs: Vec<f64> = cloud.points().iter().map(|p| p[2]).collect();
        let brute = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - zs.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!((delta_z(&cloud).unwrap() - brute).abs() < 1e-9);
    }

    #[test]
    fn digitized_codes_fit_24_bits_and_normalize_finitely(seed in any::<u64>(), depth_seed in any::<u64>()) {
        let layout = default_layout(0.985);
        let params = OpticsParams::default();
        let mut matrices = Vec::new();
        for k in 0..3 {
            let (field, _) = sampled_field(24, depth_seed.wrapping_add(k));
            let analog = scan(&field, &layout, &params).unwrap();
            let frame = digitize(&analog, &params, seed.wrapping_add(k)).unwrap();
            prop_assert!(frame.codes.rows().iter().chain(&frame.dark).all(|&c| c <= ADC_MAX));
            prop_assert_eq!(frame.dark.len(), layout.num_pds());
            matrices.push(preprocess(&frame));
        }
        let stats = fit_norm(&matrices, "prop").unwrap();
        prop_assert!(stats.std.iter().all(|&s| s >= STD_FLOOR));
        for m in &matrices {
            let v = normalize(m, &stats).unwrap();
            prop_assert_eq!(v.len(), layout.num_channels());
            prop_assert!(v.values.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn bend_heights_are_finite(angle in 0.0..=150.0f64, grid in 8usize..40) {
        let field = bend(&FieldConfig::with_grid(grid), angle).unwrap();
        prop_assert!(field.heights().iter().all(|z| z.is_finite()));
    }

    #[test]
    fn segment_max_ignores_order_within_segments(seed in any::<u64>(), segments in 1usize..4, per in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = 3;
        let rows: Vec<Vec<f64>> = (0..segments * per)
            .map(|_| (0..width).map(|_| rand::Rng::gen_range(&mut rng, -5.0..5.0)).collect())
            .collect();
        let pooled = |rows: &[Vec<f64>]| {
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![rows.len(), width], rows.concat()).unwrap());
            let y = g.segment_max(x, segments).unwrap();
            g.value(y).data().to_vec()
        };
        let mut shuffled = rows.clone();
        for chunk in shuffled.chunks_mut(per) {
            chunk.shuffle(&mut rng);
        }
        prop_assert_eq!(pooled(&rows), pooled(&shuffled));
    }

    #[test]
    fn encoder_is_permutation_invariant(seed in any::<u64>(), n in 3usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = AutoencoderArch {
            encoder_widths: vec![8, 12],
            decoder_channels: vec![6, 5, 4],
            dense_hidden: 10,
            encoder_points: None,
            ..AutoencoderArch::new(4, 16)
        };
        let ae = Autoencoder::new(&arch, seed).unwrap();
        let cloud: Vec<[f64; 3]> = (0..n)
            .map(|_| [rand::Rng::gen_range(&mut rng, 0.0..140.0), rand::Rng::gen_range(&mut rng, 0.0..140.0), rand::Rng::gen_range(&mut rng, -25.0..0.0)])
            .collect();
        let mut shuffled = cloud.clone();
        shuffled.shuffle(&mut rng);
        let (a, b) = (ae.encode(&cloud).unwrap(), ae.encode(&shuffled).unwrap());
        prop_assert!(a.iter().all(|v| v.is_finite()));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn group_partitions_cover_every_channel_once(p in 1usize..8, l in 1usize..40) {
        let leds = led_groups(p, l);
        let pds = pd_groups(p, l);
        check_partition(&leds, p * l).unwrap();
        check_partition(&pds, p * l).unwrap();
        for (i, g) in leds.iter().enumerate() {
            prop_assert_eq!(&g.members, &(0..p).map(|j| p * i + j).collect::<Vec<_>>());
        }
        for (j, g) in pds.iter().enumerate() {
            prop_assert_eq!(&g.members, &(0..l).map(|i| p * i + j).collect::<Vec<_>>());
        }
    }
}
