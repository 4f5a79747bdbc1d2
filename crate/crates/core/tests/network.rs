use nuta::net::{fuse, Fusion, FusionKind, HeadInput, NetworkConfig, TwoBranchNet};
use nuta::nn::Mode;
use nuta::tensor::no_grad;
use nuta::train::Checkpoint;
use nuta::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(name: &str) -> NetworkConfig {
    NetworkConfig::load(format!("{}/configs/{name}.cfg", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn random_clip(cfg: &NetworkConfig, n: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let len = n * cfg.input_channels * cfg.frames * cfg.height * cfg.width;
    Tensor::new(
        (0..len).map(|_| rng.gen::<f32>()).collect(),
        [n, cfg.input_channels, cfg.frames, cfg.height, cfg.width],
    )
    .unwrap()
}

/// Expected `[T, H, W]` per stage by walking the toy config by hand.
#[test]
fn toy_trace_matches_hand_walk() {
    let cfg = config("toy");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = TwoBranchNet::<f32>::init(&cfg, &mut rng).unwrap();
    let out = no_grad(|| net.forward(&random_clip(&cfg, 2, &mut rng), Mode::Eval, &mut rng)).unwrap();
    assert_eq!(out.logits.dims(), &[2, 8]);

    // stem halves space: 32 -> 16; stages 3-5 halve it again.
    let mut t = cfg.frames;
    let mut side = cfg.height / 2;
    for (i, tr) in out.trace.iter().enumerate() {
        let stage = i + 2;
        if stage > 2 {
            side /= 2;
        }
        let c = cfg.stage_channels[i];
        assert_eq!(tr.residual, [c, t, side, side], "stage {stage}");
        if cfg.nuta_stages.contains(&stage) {
            t /= 2;
            let slot = cfg.nuta_slot(stage).unwrap();
            assert_eq!(tr.nuta, Some([cfg.nuta_channels[slot], t, side, side]));
        } else {
            assert_eq!(tr.nuta, None);
        }
        assert_eq!(tr.uniform, [c, t, side, side]);
    }
    let uniform_t: Vec<usize> = out.trace.iter().map(|t| t.uniform[1]).collect();
    assert_eq!(uniform_t, vec![8, 8, 4, 2]);
    assert_eq!(out.maps.len(), 2);
    assert_eq!(out.maps[0].tensor().dims(), &[2, 4, 4, 8]);
    assert_eq!(out.maps[1].tensor().dims(), &[2, 4, 2, 4]);
}

#[test]
fn head_width_follows_head_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cfg = config("toy");
    let net = TwoBranchNet::<f32>::init(&cfg, &mut rng).unwrap();
    assert_eq!(net.head.in_features(), 64 + 64);
    cfg.head = HeadInput::Uniform;
    let net = TwoBranchNet::<f32>::init(&cfg, &mut rng).unwrap();
    assert_eq!(net.head.in_features(), 64);
}

#[test]
fn uniform_head_ignores_aggregated_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = config("toy_uniform");
    let net = TwoBranchNet::<f64>::init(&cfg, &mut rng).unwrap();
    let u = Tensor::new((0..3 * 64).map(|i| (i as f64).sin()).collect(), [3, 64]).unwrap();
    let a = Tensor::new(vec![1.0; 3 * 64], [3, 64]).unwrap();
    let b = Tensor::new(vec![-7.0; 3 * 64], [3, 64]).unwrap();
    let la = net.classify_from(&u, Some(&a), Mode::Eval, &mut rng).unwrap();
    let lb = net.classify_from(&u, Some(&b), Mode::Eval, &mut rng).unwrap();
    assert_eq!(la.data(), lb.data());
}

#[test]
fn fusion_pre_conv_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = Fusion::<f64>::init(FusionKind::Concat, 4, 8, 2, &mut rng).unwrap();
    let Fusion::Concat { conv } = &f else { panic!() };
    assert_eq!(conv.in_channels(), 12);
    assert_eq!(conv.out_channels(), 8);
    let prev = Tensor::full([1, 4, 2, 4, 4], 1.0).unwrap();
    let res = Tensor::full([1, 8, 2, 2, 2], 1.0).unwrap();
    assert_eq!(fuse(&prev, &res, &f).unwrap().dims(), &[1, 8, 2, 2, 2]);
}

#[test]
fn every_fusion_kind_runs_the_toy_net() {
    for kind in [FusionKind::Concat, FusionKind::Sum, FusionKind::NonLocal] {
        let mut cfg = config("toy");
        cfg.fusion = kind;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = TwoBranchNet::<f32>::init(&cfg, &mut rng).unwrap();
        let out = net.forward(&random_clip(&cfg, 2, &mut rng), Mode::Train, &mut rng).unwrap();
        assert_eq!(out.logits.dims(), &[2, 8], "{kind}");
        assert!(out.logits.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn constant_clip_gives_uniform_maps_in_the_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cfg = config("toy");
    // Non-zero query weights so uniformity comes from the input, not the init.
    for kind in [FusionKind::Concat, FusionKind::Sum] {
        cfg.fusion = kind;
        let mut net = TwoBranchNet::<f64>::init(&cfg, &mut rng).unwrap();
        for stage in &mut net.nuta {
            let w = &mut stage.module.phi.weight;
            *w = Tensor::param((0..w.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect(), w.shape().clone()).unwrap();
        }
        let clip = Tensor::full([1, 3, 8, 32, 32], 0.3).unwrap();
        let out = no_grad(|| net.forward(&clip, Mode::Eval, &mut rng)).unwrap();
        for m in &out.maps {
            let t = m.source_steps() as f64;
            let worst = m.tensor().data().iter().map(|v| (v - 1.0 / t).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-9, "{kind}: {worst:e}");
        }
    }
}

#[test]
fn checkpoint_restores_identical_outputs() {
    let cfg = config("toy");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut net = TwoBranchNet::<f64>::init(&cfg, &mut rng).unwrap();
    let clip = random_clip(&cfg, 2, &mut rng);
    let clip = Tensor::new(clip.data().iter().map(|&v| v as f64).collect(), clip.shape().clone()).unwrap();
    // Move the running statistics off their initial values.
    net.forward(&clip, Mode::Train, &mut rng).unwrap();
    let before = no_grad(|| net.forward(&clip, Mode::Eval, &mut rng)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    Checkpoint::capture(&mut net).save(&path).unwrap();
    let mut back = Checkpoint::load(&path).unwrap().build::<f64>().unwrap();
    let after = no_grad(|| back.forward(&clip, Mode::Eval, &mut rng)).unwrap();
    assert_eq!(before.logits.data(), after.logits.data());
}

#[test]
fn parameter_names_are_unique() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for kind in [FusionKind::Concat, FusionKind::Sum, FusionKind::NonLocal] {
        let mut cfg = config("toy_s345");
        cfg.fusion = kind;
        let mut net = TwoBranchNet::<f32>::init(&cfg, &mut rng).unwrap();
        let mut names: Vec<String> = net.named_params_mut().into_iter().map(|(n, _)| n).collect();
        names.extend(net.named_buffers_mut().into_iter().map(|(n, _)| n));
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
    }
}

#[test]
fn wrong_clip_shape_rejected() {
    let cfg = config("toy");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut net = TwoBranchNet::<f32>::init(&cfg, &mut rng).unwrap();
    let clip = Tensor::zeros([1, 3, 6, 32, 32]).unwrap();
    assert!(net.forward(&clip, Mode::Eval, &mut rng).is_err());
}

#[test]
fn every_shipped_network_config_plans() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");
    let configs = nuta::tooling::invariants::load_network_configs(dir).unwrap();
    let names: Vec<&str> = configs.iter().map(|c| c.name.as_str()).collect();
    for expected in ["i3d50", "nuta50", "nuta50_s345", "nuta50_s5", "i3d50_star", "nuta50_star", "toy", "micro"] {
        assert!(names.contains(&expected), "{expected} missing from {names:?}");
    }
    for cfg in &configs {
        cfg.plan().unwrap();
    }
}
