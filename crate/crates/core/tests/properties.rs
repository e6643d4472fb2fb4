use proptest::prelude::*;

use segcnn::conv::{conv3d_forward, conv3d_naive, ConvFilter, ConvMode};
use segcnn::data::{prepool, volume_bytes, volume_from_bytes, PoolStrategy};
use segcnn::layers::{batchnorm_forward, maxpool3d_forward, pool_extent, BatchNormState, Mode};
use segcnn::rng::{rng_normal, rng_uniform, Rng};
use segcnn::segmentation::{make_plan, segment};
use segcnn::tensor::{concat_channels, ravel, slice_box, unravel, zero_pad, Tensor};

fn seeded(seed: u64, shape: &[usize]) -> Tensor<f64> {
    rng_uniform(&mut Rng::new(seed), shape, -1.0, 1.0).unwrap()
}

fn shape_strategy(rank: std::ops::RangeInclusive<usize>, max: usize) -> impl Strategy<Value = Vec<usize>> {
    rank.prop_flat_map(move |r| prop::collection::vec(1..=max, r))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ravel_is_a_bijection(shape in shape_strategy(1..=5, 4), pick in any::<u64>()) {
        let n: usize = shape.iter().product();
        let flat = (pick % n as u64) as usize;
        let idx = unravel(&shape, flat);
        prop_assert!(idx.iter().zip(&shape).all(|(i, s)| i < s));
        prop_assert_eq!(ravel(&shape, &idx), flat);
    }

    #[test]
    fn pad_then_slice_restores(shape in shape_strategy(1..=5, 4), pads in prop::collection::vec((0usize..3, 0usize..3), 5), seed in any::<u64>()) {
        let t = seeded(seed, &shape);
        let pad = &pads[..shape.len()];
        let padded = zero_pad(&t, pad).unwrap();
        let origin: Vec<usize> = pad.iter().map(|p| p.0).collect();
        prop_assert_eq!(slice_box(&padded, &origin, &shape).unwrap(), t.clone());
        // Padding adds only zeros.
        prop_assert_eq!(padded.sum(), t.sum());
    }

    #[test]
    fn concat_is_associative(dims in prop::collection::vec(1usize..4, 3), cs in prop::collection::vec(1usize..4, 3), seed in any::<u64>()) {
        let parts: Vec<Tensor<f64>> = cs
            .iter()
            .enumerate()
            .map(|(i, &c)| seeded(seed.wrapping_add(i as u64), &[dims[0], dims[1], dims[2], c]))
            .collect();
        let left = concat_channels(&[&concat_channels(&[&parts[0], &parts[1]]).unwrap(), &parts[2]]).unwrap();
        let right = concat_channels(&[&parts[0], &concat_channels(&[&parts[1], &parts[2]]).unwrap()]).unwrap();
        prop_assert_eq!(left, right);
    }

    #[test]
    fn channel_slices_reconstruct(dims in prop::collection::vec(1usize..4, 3), c in 2usize..6, cut in 1usize..5, seed in any::<u64>()) {
        let cut = cut.min(c - 1);
        let t = seeded(seed, &[dims[0], dims[1], dims[2], c]);
        let a = slice_box(&t, &[0, 0, 0, 0], &[dims[0], dims[1], dims[2], cut]).unwrap();
        let b = slice_box(&t, &[0, 0, 0, cut], &[dims[0], dims[1], dims[2], c - cut]).unwrap();
        prop_assert_eq!(concat_channels(&[&a, &b]).unwrap(), t);
    }

    #[test]
    fn rng_streams_repeat(seed in any::<u64>(), len in 1usize..64) {
        let a = rng_normal::<f64>(&mut Rng::new(seed), &[len], 0.0, 1.0).unwrap();
        let b = rng_normal::<f64>(&mut Rng::new(seed), &[len], 0.0, 1.0).unwrap();
        prop_assert_eq!(a, b);
        let u = rng_uniform::<f64>(&mut Rng::new(seed), &[len], -2.0, 3.0).unwrap();
        prop_assert!(u.data().iter().all(|&v| (-2.0..3.0).contains(&v)));
    }

    #[test]
    fn conv_is_linear(n in 1usize..3, dims in prop::collection::vec(1usize..6, 3), c in 1usize..4, m in 1usize..4, a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>()) {
        let shape = [n, dims[0], dims[1], dims[2], c];
        let x = seeded(seed, &shape);
        let y = seeded(seed ^ 1, &shape);
        let f = ConvFilter::new(seeded(seed ^ 2, &[c, 3, 3, 3, m]), Tensor::zeros(&[m])).unwrap();
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = conv3d_forward(&mix, &f, ConvMode::Gemm).unwrap();
        let fx = conv3d_forward(&x, &f, ConvMode::Gemm).unwrap();
        let fy = conv3d_forward(&y, &f, ConvMode::Gemm).unwrap();
        let rhs = fx.zip_map(&fy, |p, q| a * p + b * q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn conv_gemm_matches_naive_f64(n in 1usize..3, dims in prop::collection::vec(1usize..7, 3), c in 1usize..9, m in 1usize..10, side in prop::sample::select(vec![1usize, 3, 5]), seed in any::<u64>()) {
        let x = seeded(seed, &[n, dims[0], dims[1], dims[2], c]);
        let f = ConvFilter::new(seeded(seed ^ 7, &[c, side, side, side, m]), seeded(seed ^ 9, &[m])).unwrap();
        let fast = conv3d_forward(&x, &f, ConvMode::Gemm).unwrap();
        let slow = conv3d_naive(&x, &f).unwrap();
        prop_assert!(fast.max_abs_diff(&slow).unwrap() < 1e-10);
    }

    #[test]
    fn segment_is_linear(dims in prop::collection::vec(4usize..12, 3), k in 1usize..4, boundary in 0usize..4, a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>()) {
        prop_assume!(dims.iter().all(|&d| d >= k));
        let plan = make_plan(&dims, k, boundary).unwrap();
        let u = seeded(seed, &dims);
        let v = seeded(seed ^ 3, &dims);
        let lhs = segment(&u.zip_map(&v, |p, q| a * p + b * q).unwrap(), &plan).unwrap().data;
        let su = segment(&u, &plan).unwrap().data;
        let sv = segment(&v, &plan).unwrap().data;
        prop_assert!(lhs.max_abs_diff(&su.zip_map(&sv, |p, q| a * p + b * q).unwrap()).unwrap() < 1e-12);
        prop_assert_eq!(lhs.channels(), k.pow(3));
    }

    #[test]
    fn region_cores_tile_core_grid(dims in prop::collection::vec(1usize..20, 3), k in 1usize..6, boundary in 0usize..4) {
        prop_assume!(dims.iter().all(|&d| d >= k));
        let plan = make_plan(&dims, k, boundary).unwrap();
        let core = plan.region_core;
        let grid: Vec<usize> = (0..3).map(|a| core[a] * k).collect();
        let mut hits = vec![0u32; grid.iter().product()];
        let extra = if k > 1 { boundary } else { 0 };
        prop_assert!((0..3).all(|a| plan.region_shape[a] == core[a] + extra));
        for r in &plan.regions {
            for x in 0..core[0] {
                for y in 0..core[1] {
                    for z in 0..core[2] {
                        let p = [r.core_origin[0] + x, r.core_origin[1] + y, r.core_origin[2] + z];
                        prop_assert!((0..3).all(|a| p[a] < grid[a]));
                        hits[ravel(&grid, &p)] += 1;
                    }
                }
            }
        }
        prop_assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn pool_extent_law_and_monotonicity(n in 1usize..3, dims in prop::collection::vec(1usize..8, 3), c in 1usize..3, seed in any::<u64>()) {
        let shape = [n, dims[0], dims[1], dims[2], c];
        let x = seeded(seed, &shape);
        let bump = rng_uniform::<f64>(&mut Rng::new(seed ^ 5), &shape, 0.0, 1.0).unwrap();
        let x2 = x.zip_map(&bump, |a, b| a + b).unwrap();
        let (p, _) = maxpool3d_forward(&x).unwrap();
        let (p2, _) = maxpool3d_forward(&x2).unwrap();
        prop_assert_eq!(p.shape(), &[n, pool_extent(dims[0]), pool_extent(dims[1]), pool_extent(dims[2]), c][..]);
        prop_assert!(p.data().iter().zip(p2.data()).all(|(a, b)| a <= b));

        let flat = Tensor::full(&shape, 0.25);
        let (pf, _) = maxpool3d_forward(&flat).unwrap();
        prop_assert!(pf.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn batchnorm_standardizes_in_train_mode(n in 2usize..4, dims in prop::collection::vec(2usize..5, 3), c in 1usize..4, seed in any::<u64>()) {
        let x = rng_normal::<f64>(&mut Rng::new(seed), &[n, dims[0], dims[1], dims[2], c], 3.0, 2.0).unwrap();
        let mut state = BatchNormState::<f64>::new(c);
        let (y, _) = batchnorm_forward(&x, &mut state, Mode::Train).unwrap();
        let count = (y.len() / c) as f64;
        for ch in 0..c {
            let vals: Vec<f64> = y.data().iter().skip(ch).step_by(c).copied().collect();
            let mean = vals.iter().sum::<f64>() / count;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            prop_assert!(mean.abs() < 1e-6);
            // Batch variance is about 4, so epsilon shifts the result by ~1e-5/4.
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
        prop_assert!(state.running_var.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn prepool_preserves_mean_and_orders(dims in prop::collection::vec(1usize..4, 3), factor in 1usize..4, seed in any::<u64>()) {
        let shape: Vec<usize> = dims.iter().map(|d| d * factor).collect();
        let v = seeded(seed, &shape);
        let avg = prepool(&v, factor, PoolStrategy::Average).unwrap();
        prop_assert!((avg.mean() - v.mean()).abs() < 1e-12);

        let ragged: Vec<usize> = shape.iter().map(|s| s + 1).collect();
        let v = seeded(seed, &ragged);
        let avg = prepool(&v, factor, PoolStrategy::Average).unwrap();
        let max = prepool(&v, factor, PoolStrategy::Max).unwrap();
        let min = prepool(&v.scale(-1.0), factor, PoolStrategy::Max).unwrap().scale(-1.0);
        prop_assert_eq!(max.shape(), avg.shape());
        for ((hi, mid), lo) in max.data().iter().zip(avg.data()).zip(min.data()) {
            prop_assert!(hi >= mid && mid >= lo);
        }
    }

    #[test]
    fn volume_bytes_round_trip(shape in shape_strategy(1..=5, 5), seed in any::<u64>()) {
        let t = seeded(seed, &shape).cast::<f32>();
        let bytes = volume_bytes(&t);
        prop_assert_eq!(bytes.len(), 8 + 4 * shape.len() + 4 * t.len());
        prop_assert_eq!(volume_from_bytes::<f32>(&bytes).unwrap(), t);
    }
}

#[test]
fn uniform_mean_converges() {
    let t = rng_uniform::<f64>(&mut Rng::new(2024), &[1_000_000], 0.0, 1.0).unwrap();
    assert!((t.mean() - 0.5).abs() < 0.005);
}

#[test]
fn gemm_matches_naive_on_segmented_inputs_f32() {
    // Twenty configurations, several with k^3 channels from segmentation.
    let mut rng = Rng::new(99);
    for case in 0..20 {
        let k = [1, 2, 3][case % 3];
        let vol: Vec<usize> = (0..3).map(|_| 4 + rng.below(9)).collect();
        let plan = make_plan(&vol, k, 3).unwrap();
        let batch = 1 + rng.below(3);
        let x = rng_uniform::<f32>(&mut rng, &[batch, vol[0], vol[1], vol[2], 1], -1.0, 1.0).unwrap();
        let x = segment(&x, &plan).unwrap().data;
        let m = 1 + rng.below(12);
        let f = ConvFilter::new(
            rng_uniform(&mut rng, &[k.pow(3), 3, 3, 3, m], -0.5, 0.5).unwrap(),
            rng_uniform(&mut rng, &[m], -0.5, 0.5).unwrap(),
        )
        .unwrap();
        let fast = conv3d_forward(&x, &f, ConvMode::Gemm).unwrap();
        let slow = conv3d_naive(&x, &f).unwrap();
        let err = fast.max_abs_diff(&slow).unwrap();
        assert!(err < 1e-5, "case {case}: k={k} vol={vol:?} m={m} err={err}");
    }
}
