use nuta::net::{FusionKind, NetworkConfig, TwoBranchNet};
use nuta::nn::{conv3d, Conv3d, Mode};
use nuta::temporal::{gamma, gamma_inverse, projection_map, HeadLayout, NutaParams, ProjectionMap};
use nuta::tensor::{macs::count_macs, no_grad};
use nuta::tooling::flops::{config_cost, Convention};
use nuta::tooling::heatmap::HeadGrid;
use nuta::train::{attention_mass, TrainConfig};
use nuta::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(dims: [usize; 5], values: &[f64]) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    Tensor::new(values.iter().cycle().take(n).copied().collect(), dims).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gamma_round_trip_is_exact(
        n in 1usize..3, heads in 1usize..4, per in 1usize..3, t in 1usize..5, h in 1usize..3, w in 1usize..3,
        values in prop::collection::vec(-10.0f64..10.0, 1..40),
    ) {
        let x = tensor([n, heads * per, t, h, w], &values);
        let layout = HeadLayout::new(heads).unwrap();
        let g = gamma(&x, layout).unwrap();
        prop_assert_eq!(g.dims(), &[n, heads, t, per * h * w]);
        let back = gamma_inverse(&g, layout, [h, w]).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn maps_are_row_stochastic(
        seed in any::<u64>(), heads in prop::sample::select(vec![1usize, 2, 4]),
        t in prop::sample::select(vec![2usize, 4, 6, 8]), scale in 0.01f64..30.0,
        values in prop::collection::vec(-1.0f64..1.0, 1..64),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = heads * 2;
        let p = NutaParams::<f64>::init(c, c, heads, 2, &mut rng).unwrap();
        let f = tensor([1, c, t, 2, 2], &values).scale(scale).unwrap();
        let m = projection_map(&f, &p).unwrap();
        prop_assert!(m.max_row_error().unwrap() <= 1e-6);
        prop_assert!(m.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn softmax_ignores_row_shift(values in prop::collection::vec(-50.0f64..50.0, 6), shift in -100.0f64..100.0) {
        let x = Tensor::new(values.clone(), [2, 3]).unwrap();
        let y = Tensor::new(values.iter().map(|v| v + shift).collect(), [2, 3]).unwrap();
        let (a, b) = (x.softmax_lastdim().unwrap(), y.softmax_lastdim().unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
        for row in a.data().chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grouped_conv_is_linear(
        a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>(),
        xs in prop::collection::vec(-1.0f64..1.0, 8..32), ys in prop::collection::vec(-1.0f64..1.0, 8..32),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = Conv3d::<f64>::temporal3(4, 6, 2, &mut rng).unwrap();
        let (x, y) = (tensor([1, 4, 4, 2, 2], &xs), tensor([1, 4, 4, 2, 2], &ys));
        let lhs = conv3d(&x.scale(a).unwrap().add(&y.scale(b).unwrap()).unwrap(), &conv).unwrap();
        let rhs = conv3d(&x, &conv).unwrap().scale(a).unwrap().add(&conv3d(&y, &conv).unwrap().scale(b).unwrap()).unwrap();
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn schedule_is_pointwise(base in 1e-4f64..1.0, factor in 1.0f64..20.0, drops in prop::collection::btree_set(1usize..50, 0..4), e in 0usize..50) {
        let cfg = TrainConfig {
            epochs: 50, base_lr: base, momentum: 0.9, weight_decay: 1e-4,
            lr_drop_epochs: drops.iter().copied().collect(), lr_drop_factor: factor,
            batch_size: 1, seed: 0, flip: false, temporal_offset: false,
        };
        cfg.validate().unwrap();
        let count = drops.iter().filter(|&&d| d <= e).count() as i32;
        prop_assert!((cfg.lr_at(e) - base * factor.powi(-count)).abs() <= 1e-15 * base.max(1.0));
    }

    #[test]
    fn heatmap_text_is_bit_exact(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 12)) {
        let g = HeadGrid::new(1, 0, 3, 4, values).unwrap();
        let back = HeadGrid::from_text(&g.to_text()).unwrap();
        for (a, b) in g.values.iter().zip(&back.values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn heatmap_levels_are_monotone(mut values in prop::collection::vec(0.0f64..1.0, 2..20)) {
        let g = HeadGrid::new(0, 0, 1, values.len(), values.clone()).unwrap();
        values.sort_by(f64::total_cmp);
        let levels: Vec<u8> = values.iter().map(|&v| g.level(v)).collect();
        prop_assert!(levels.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn uniform_mass_is_k_over_t(t in 2usize..17, k_frac in 0.0f64..1.0, heads in 1usize..5) {
        let k = 1 + ((t - 1) as f64 * k_frac) as usize % (t - 1);
        let m = ProjectionMap::from_tensor(Tensor::full([1, heads, t / 2, t], 1.0 / t as f64).unwrap(), 1e-12).unwrap();
        let frames = vec![(0..k).collect::<Vec<_>>()];
        prop_assert!((attention_mass(&m, &frames).unwrap() - k as f64 / t as f64).abs() < 1e-12);
    }
}

fn small_config(width: usize, heads: usize, frames: usize, fusion: FusionKind, side: usize) -> NetworkConfig {
    NetworkConfig::from_toml(&format!(
        r#"
name = "random"
frames = {frames}
height = {side}
width = {side}
stem_channels = {width}
stem_kernel = [3, 3, 3]
stem_stride = [1, 2, 2]
stage_channels = [{width}, {w2}, {w4}]
stage_blocks = [1, 2, 1]
stage_spatial_strides = [1, 2, 2]
stage_temporal_kernels = [3, 1, 3]
nuta_stages = [3, 4]
nuta_heads = [{heads}, {heads}]
nuta_groups = [{heads}, 1]
nuta_channels = [{w2}, {w4}]
fusion = "{fusion}"
num_classes = 5
"#,
        w2 = width * 2,
        w4 = width * 4,
    ))
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cost_model_matches_execution(
        width in prop::sample::select(vec![2usize, 4]), heads in prop::sample::select(vec![1usize, 2]),
        frames in prop::sample::select(vec![4usize, 8]), side in prop::sample::select(vec![8usize, 16]),
        fusion in prop::sample::select(vec![FusionKind::Concat, FusionKind::Sum, FusionKind::NonLocal]),
    ) {
        let cfg = small_config(width, heads, frames, fusion, side);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = TwoBranchNet::<f32>::init(&cfg, &mut rng).unwrap();
        let clip = Tensor::zeros([1, 3, frames, side, side]).unwrap();
        let (out, counted) = count_macs(|| no_grad(|| net.forward(&clip, Mode::Eval, &mut rng)));
        out.unwrap();
        prop_assert_eq!(config_cost(&cfg).unwrap().total_macs(), counted);
    }

    #[test]
    fn cost_ratio_ignores_convention(
        wa in prop::sample::select(vec![2usize, 4, 8]), wb in prop::sample::select(vec![2usize, 4, 8]),
        side in prop::sample::select(vec![16usize, 32]),
    ) {
        let a = config_cost(&small_config(wa, 2, 8, FusionKind::Concat, side)).unwrap();
        let b = config_cost(&small_config(wb, 2, 8, FusionKind::Sum, side)).unwrap();
        let by = |c: Convention| a.total(c) as f64 / b.total(c) as f64;
        prop_assert_eq!(by(Convention::Macs), by(Convention::TwoFlopsPerMac));
        prop_assert_eq!(a.ratio_to(&b), by(Convention::Macs));
        prop_assert_eq!(a.layers.iter().map(|l| l.macs).sum::<u64>(), a.total_macs());
    }
}
