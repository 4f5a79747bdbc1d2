//! The aggregation module against the loop-by-loop references in `common`.

mod common;

use common::*;
use nuta::nn::Mode;
use nuta::temporal::{nuta_forward, projection_map, temporal_sync, NutaParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn projection_map_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for trial in 0..40 {
        let (n, c, t, s, heads, groups, out) = geometry(&mut rng);
        let scaled = trial % 2 == 1;
        let p = module(&mut rng, c, out, heads, groups, scaled, false);
        let f = random([n, c, t, s, s], &mut rng);
        let m = projection_map(&f, &p).unwrap();
        let reference = reference_map(&Nd::of(&f), &p, heads, scaled);
        let flat: Vec<f64> = reference.into_iter().flatten().flatten().flatten().collect();
        worst = worst.max(max_diff(m.tensor().data(), &flat));
    }
    assert!(worst < TOL, "worst {worst:e}");
}

#[test]
fn nuta_forward_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for trial in 0..30 {
        let (n, c, t, s, heads, groups, out) = geometry(&mut rng);
        let (scaled, norm) = (trial % 2 == 1, trial % 3 == 0);
        let mut p = module(&mut rng, c, out, heads, groups, scaled, norm);
        let f = random([n, c, t, s, s], &mut rng);
        let (y, m) = nuta_forward(&f, &mut p, Mode::Eval).unwrap();

        let fr = Nd::of(&f);
        let map = reference_map(&fr, &p, heads, scaled);
        let v = conv_time3(&fr, &p.delta.weight, p.delta.groups);
        let mut expect = conv_point(&aggregate(&map, &v, heads), &p.compress.weight);
        if let Some(bn) = &p.compress_norm {
            expect = norm_eval(&expect, bn);
        }
        assert_eq!(y.dims(), &expect.d[..]);
        assert_eq!(m.out_steps(), t / 2);
        let err = max_diff(y.data(), &expect.v);
        assert!(err < TOL, "trial {trial}: {err:e}");
    }
}

#[test]
fn temporal_sync_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for trial in 0..30 {
        let (n, c, t, s, heads, groups, out) = geometry(&mut rng);
        let (scaled, norm) = (trial % 2 == 0, trial % 3 == 1);
        let mut p = module(&mut rng, c, out, heads, groups, scaled, norm);
        let f = random([n, c, t, s, s], &mut rng);
        let f_res = random([n, c, t, s, s], &mut rng);
        let m = projection_map(&f, &p).unwrap();
        let y = temporal_sync(&f_res, &m, &mut p, Mode::Eval).unwrap();

        let map = reference_map(&Nd::of(&f), &p, heads, scaled);
        let r = Nd::of(&f_res);
        let z = conv_time3(&r, &p.zeta.weight, p.zeta.groups);
        let mut expect = conv_point(&aggregate(&map, &z, heads), &p.sync.weight);
        if let Some(bn) = &p.sync_norm {
            expect = norm_eval(&expect, bn);
        }
        let pooled = max_pool_time(&r);
        for (e, q) in expect.v.iter_mut().zip(&pooled.v) {
            *e += q;
        }
        let err = max_diff(y.data(), &expect.v);
        assert!(err < TOL, "trial {trial}: {err:e}");
    }
}

#[test]
fn sync_output_matches_aggregated_branch_extent() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut p = NutaParams::<f64>::init(8, 12, 4, 2, &mut rng).unwrap();
    let f = random([2, 8, 6, 2, 3], &mut rng);
    let (y, m) = nuta_forward(&f, &mut p, Mode::Eval).unwrap();
    let s = temporal_sync(&f, &m, &mut p, Mode::Eval).unwrap();
    assert_eq!(y.dims(), &[2, 12, 3, 2, 3]);
    assert_eq!(s.dims(), &[2, 8, 3, 2, 3]);
}

#[test]
fn all_three_within_tolerance_over_many_cases() {
    let worst = worst_errors(105, 60);
    assert!(worst.iter().all(|&e| e < TOL), "{worst:?}");
}
