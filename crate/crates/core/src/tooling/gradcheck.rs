//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Every check reduces the output of the function under test to a scalar with
//! a fixed random weighting, runs one backward pass, then re-evaluates the
//! scalar at `x ± eps` for sampled coordinates of every differentiable input.
//!
//! The error of one input tensor is `|a - n| / max(|a|, |n|)` over the sampled
//! coordinates, with `a` the tape gradient and `n` the numeric one (both as
//! vectors, Euclidean norm). When both norms fall below `1e-8` the absolute
//! difference is reported instead.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{fuse, Fusion, FusionKind, NetworkConfig, TwoBranchNet};
use crate::nn::{
    batchnorm3d, conv3d, cross_entropy, global_avgpool, spatial_avgpool, temporal_maxpool2, BatchNorm3d, Conv3d, Linear,
    Mode, TemporalPad,
};
use crate::temporal::{gamma, gamma_inverse, nuta_forward, projection_map, temporal_sync, HeadLayout, NutaParams};
use crate::tensor::{no_grad, Tensor};

pub const EPS: f64 = 1e-5;
pub const MIN_COORDS: usize = 20;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const NET_TOLERANCE: f64 = 1e-3;
/// Relative gap between one-sided slopes that marks a non-smooth point.
pub const KINK: f64 = 1e-3;

const MICRO_CONFIG: &str = include_str!("../../configs/micro.cfg");

/// Something with differentiable leaves and a scalar objective.
pub trait GradTarget {
    fn leaves(&mut self) -> Vec<(String, &mut Tensor<f64>)>;
    fn objective(&mut self) -> Result<Tensor<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeafError {
    pub name: String,
    pub coords: usize,
    /// Coordinates where the one-sided slopes disagree.
    pub kinks: usize,
    pub error: f64,
}

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub tolerance: f64,
    pub leaves: Vec<LeafError>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.leaves.iter().map(|l| l.error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let coords: usize = self.leaves.iter().map(|l| l.coords).sum();
        let kinks: usize = self.leaves.iter().map(|l| l.kinks).sum();
        write!(
            f,
            "{:<28} {:>10.3e}  (tol {:.0e}, {} leaves, {} coords, {} kinks)  {}",
            self.name,
            self.worst(),
            self.tolerance,
            self.leaves.len(),
            coords,
            kinks,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

fn set(leaf: &mut Tensor<f64>, i: usize, v: f64) -> Result<()> {
    let mut data = leaf.to_vec();
    data[i] = v;
    *leaf = Tensor::param(data, leaf.shape().clone())?;
    Ok(())
}

fn relative(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Checks `target` at `min_coords` sampled coordinates per leaf (all of them
/// for smaller leaves).
pub fn check<G: GradTarget>(
    name: &str,
    target: &mut G,
    tolerance: f64,
    min_coords: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradReport> {
    for (_, leaf) in target.leaves() {
        leaf.zero_grad();
    }
    target.objective()?.backward()?;
    let analytic: Vec<Vec<f64>> = target
        .leaves()
        .iter()
        .map(|(_, l)| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();
    let count = analytic.len();
    let mut leaves = Vec::with_capacity(count);
    for k in 0..count {
        let (leaf_name, numel) = {
            let all = target.leaves();
            (all[k].0.clone(), all[k].1.numel())
        };
        let coords: Vec<usize> = if numel <= min_coords {
            (0..numel).collect()
        } else {
            sample(rng, numel, min_coords).into_vec()
        };
        let mut kinks = 0;
        let mut a = Vec::with_capacity(coords.len());
        let mut n = Vec::with_capacity(coords.len());
        for &i in &coords {
            let x0 = target.leaves()[k].1.data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                set(target.leaves().swap_remove(k).1, i, v)?;
                Ok(no_grad(|| target.objective())?.item())
            };
            let plus = eval(x0 + EPS)?;
            let minus = eval(x0 - EPS)?;
            let mid = eval(x0)?;
            set(target.leaves().swap_remove(k).1, i, x0)?;
            let (right, left) = ((plus - mid) / EPS, (mid - minus) / EPS);
            let numeric = if (right - left).abs() > KINK * right.abs().max(left.abs()).max(KINK) {
                // A ReLU or max-pool switch lies inside the step: either
                // one-sided slope is a valid derivative.
                kinks += 1;
                if (right - analytic[k][i]).abs() < (left - analytic[k][i]).abs() {
                    right
                } else {
                    left
                }
            } else {
                (plus - minus) / (2.0 * EPS)
            };
            a.push(analytic[k][i]);
            n.push(numeric);
        }
        leaves.push(LeafError {
            name: leaf_name,
            coords: coords.len(),
            kinks,
            error: relative(&a, &n),
        });
    }
    Ok(GradReport {
        name: name.to_string(),
        tolerance,
        leaves,
    })
}

fn random(dims: &[usize], rng: &mut impl Rng) -> Result<Tensor<f64>> {
    let n = dims.iter().product();
    Tensor::param((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), dims)
}

/// Leaves are free tensors; the objective weights the output of `f` with a
/// fixed random tensor. Layer weights are passed in as leaves and written
/// into the layer inside `f`.
pub struct FnTarget<F> {
    inputs: Vec<(String, Tensor<f64>)>,
    f: F,
    weights: Option<Vec<f64>>,
    seed: u64,
}

impl<F: FnMut(&[Tensor<f64>]) -> Result<Tensor<f64>>> FnTarget<F> {
    pub fn new(inputs: Vec<(&str, Tensor<f64>)>, seed: u64, f: F) -> Self {
        FnTarget {
            inputs: inputs.into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
            f,
            weights: None,
            seed,
        }
    }
}

impl<F: FnMut(&[Tensor<f64>]) -> Result<Tensor<f64>>> GradTarget for FnTarget<F> {
    fn leaves(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        self.inputs.iter_mut().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn objective(&mut self) -> Result<Tensor<f64>> {
        let xs: Vec<Tensor<f64>> = self.inputs.iter().map(|(_, t)| t.clone()).collect();
        let out = (self.f)(&xs)?;
        let seed = self.seed;
        let w = self.weights.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()
        });
        if w.len() != out.numel() {
            return Err(Error::invalid("gradcheck", "output size changed between evaluations"));
        }
        out.dot_const(w)
    }
}

fn conv_with(weight: &Tensor<f64>, bias: Option<&Tensor<f64>>, template: &Conv3d<f64>) -> Conv3d<f64> {
    let mut c = template.clone();
    c.weight = weight.clone();
    if let Some(b) = bias {
        c.bias = Some(b.clone());
    }
    c
}

/// Network target: the leaves are every trainable parameter plus the clip;
/// the objective is the training-mode cross-entropy with a fixed dropout mask.
pub struct NetTarget {
    pub net: TwoBranchNet<f64>,
    pub clip: Tensor<f64>,
    pub labels: Vec<usize>,
    pub seed: u64,
}

impl GradTarget for NetTarget {
    fn leaves(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        let mut v = self.net.named_params_mut();
        v.push(("clip".into(), &mut self.clip));
        v
    }

    fn objective(&mut self) -> Result<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let out = self.net.forward(&self.clip, Mode::Train, &mut rng)?;
        cross_entropy(&out.logits, &self.labels)
    }
}

/// A small network with aggregation modules on its last two stages.
pub fn micro_config(fusion: FusionKind) -> NetworkConfig {
    let mut cfg = NetworkConfig::from_toml(MICRO_CONFIG).expect("micro config is valid");
    cfg.fusion = fusion;
    cfg
}

/// The full suite, in a fixed order with fixed seeds.
pub fn run_suite(min_coords: usize) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut reports = Vec::new();
    let mut push = |r: GradReport| reports.push(r);
    let r = &mut rng;

    // conv3d, plain, grouped, strided with padding, replicate padding
    let cases: [(&str, usize, usize, [usize; 3], [usize; 3], [usize; 3], usize, bool, TemporalPad); 4] = [
        ("conv3d", 2, 3, [3, 3, 3], [1, 1, 1], [1, 1, 1], 1, true, TemporalPad::Zeros),
        ("conv3d_grouped", 4, 6, [3, 1, 1], [1, 1, 1], [1, 0, 0], 2, false, TemporalPad::Zeros),
        ("conv3d_strided", 2, 2, [1, 3, 3], [2, 2, 2], [0, 1, 1], 1, false, TemporalPad::Zeros),
        ("conv3d_replicate", 2, 2, [3, 1, 1], [1, 1, 1], [1, 0, 0], 1, false, TemporalPad::Replicate),
    ];
    for (name, cin, cout, k, s, p, g, bias, pad) in cases {
        let conv = Conv3d::init(cin, cout, k, s, p, g, bias, r)?.with_temporal_pad(pad);
        let mut inputs = vec![("x", random(&[2, cin, 4, 5, 5], r)?), ("weight", conv.weight.to_param())];
        if let Some(b) = &conv.bias {
            inputs.push(("bias", random(b.dims(), r)?));
        }
        let mut t = FnTarget::new(inputs, r.gen(), |xs: &[Tensor<f64>]| {
            conv3d(&xs[0], &conv_with(&xs[1], xs.get(2), &conv))
        });
        push(check(name, &mut t, OP_TOLERANCE, min_coords, r)?);
    }

    let mut t = FnTarget::new(vec![("x", random(&[2, 3, 4, 3, 2], r)?)], r.gen(), |xs: &[Tensor<f64>]| {
        temporal_maxpool2(&xs[0])
    });
    push(check("temporal_maxpool2", &mut t, OP_TOLERANCE, min_coords, r)?);
    let mut t = FnTarget::new(vec![("x", random(&[2, 3, 2, 4, 4], r)?)], r.gen(), |xs: &[Tensor<f64>]| {
        spatial_avgpool(&xs[0], 2)
    });
    push(check("spatial_avgpool", &mut t, OP_TOLERANCE, min_coords, r)?);
    let mut t = FnTarget::new(vec![("x", random(&[2, 3, 2, 3, 3], r)?)], r.gen(), |xs: &[Tensor<f64>]| {
        global_avgpool(&xs[0])
    });
    push(check("global_avgpool", &mut t, OP_TOLERANCE, min_coords, r)?);

    let mut bn = BatchNorm3d::<f64>::new(3)?;
    let scale = random(&[3], r)?;
    let shift = random(&[3], r)?;
    let mut t = FnTarget::new(
        vec![("x", random(&[2, 3, 2, 3, 3], r)?), ("scale", scale), ("shift", shift)],
        r.gen(),
        move |xs: &[Tensor<f64>]| {
            bn.scale = xs[1].clone();
            bn.shift = xs[2].clone();
            batchnorm3d(&xs[0], &mut bn, true)
        },
    );
    push(check("batchnorm3d", &mut t, OP_TOLERANCE, min_coords, r)?);

    let mut t = FnTarget::new(vec![("x", random(&[3, 2, 5], r)?.scale(3.0)?.to_param())], r.gen(), |xs: &[Tensor<f64>]| {
        xs[0].softmax_lastdim()
    });
    push(check("softmax_lastdim", &mut t, OP_TOLERANCE, min_coords, r)?);
    let mut t = FnTarget::new(
        vec![("a", random(&[2, 3, 4], r)?), ("b", random(&[2, 4, 5], r)?)],
        r.gen(),
        |xs: &[Tensor<f64>]| xs[0].matmul(&xs[1]),
    );
    push(check("matmul", &mut t, OP_TOLERANCE, min_coords, r)?);

    let lin = Linear::<f64>::init(4, 3, r)?;
    let mut t = FnTarget::new(
        vec![("x", random(&[2, 4], r)?), ("weight", random(&[4, 3], r)?), ("bias", random(&[3], r)?)],
        r.gen(),
        move |xs: &[Tensor<f64>]| {
            let mut l = lin.clone();
            l.weight = xs[1].clone();
            l.bias = xs[2].clone();
            l.forward(&xs[0])
        },
    );
    push(check("linear", &mut t, OP_TOLERANCE, min_coords, r)?);

    let mut t = FnTarget::new(vec![("logits", random(&[4, 5], r)?)], r.gen(), |xs: &[Tensor<f64>]| {
        cross_entropy(&xs[0], &[0, 4, 2, 2])
    });
    push(check("cross_entropy", &mut t, OP_TOLERANCE, min_coords, r)?);

    let seed: u64 = r.gen();
    let mut t = FnTarget::new(vec![("x", random(&[2, 3, 2, 2, 2], r)?)], r.gen(), move |xs: &[Tensor<f64>]| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
        xs[0].relu()?.dropout(0.5, true, &mut mask_rng)
    });
    push(check("relu_dropout", &mut t, OP_TOLERANCE, min_coords, r)?);

    let mut t = FnTarget::new(
        vec![("a", random(&[1, 4, 4, 2, 2], r)?), ("b", random(&[1, 2, 4, 2, 2], r)?)],
        r.gen(),
        |xs: &[Tensor<f64>]| {
            let g = gamma(&xs[0].concat_channels(&xs[1])?, HeadLayout::new(3)?)?;
            gamma_inverse(&g.mul(&g)?, HeadLayout::new(3)?, [2, 2])?.permute(&[0, 2, 1, 3, 4])?.mean_lastdims(2)
        },
    );
    push(check("concat_gamma_permute", &mut t, OP_TOLERANCE, min_coords, r)?);

    // aggregation module, with every weight as a leaf
    for (name, with_norm) in [("nuta", false), ("nuta_norm", true)] {
        let mut p = NutaParams::<f64>::init(4, 6, 2, 2, r)?;
        if with_norm {
            p = p.with_norm()?;
        }
        let mut inputs = vec![("f", random(&[2, 4, 4, 2, 2], r)?), ("f_res", random(&[2, 4, 4, 2, 2], r)?)];
        let mut names = Vec::new();
        for (n, w) in p.params_mut() {
            names.push(n);
            inputs.push((n, w.to_param()));
        }
        let mut module = p.clone();
        let map_target = |xs: &[Tensor<f64>], module: &mut NutaParams<f64>| {
            for ((_, w), x) in module.params_mut().into_iter().zip(&xs[2..]) {
                *w = x.clone();
            }
        };
        let mut t = FnTarget::new(inputs.clone(), r.gen(), |xs: &[Tensor<f64>]| {
            map_target(xs, &mut module);
            Ok(projection_map(&xs[0], &module)?.tensor().clone())
        });
        if !with_norm {
            push(check("projection_map", &mut t, OP_TOLERANCE, min_coords, r)?);
        }
        let mut module = p.clone();
        let mut t = FnTarget::new(inputs.clone(), r.gen(), |xs: &[Tensor<f64>]| {
            map_target(xs, &mut module);
            Ok(nuta_forward(&xs[0], &mut module, Mode::Train)?.0)
        });
        push(check(&format!("{name}_forward"), &mut t, OP_TOLERANCE, min_coords, r)?);
        let mut module = p.clone();
        let mut t = FnTarget::new(inputs, r.gen(), |xs: &[Tensor<f64>]| {
            map_target(xs, &mut module);
            let m = projection_map(&xs[0], &module)?;
            temporal_sync(&xs[1], &m, &mut module, Mode::Train)
        });
        let label = if with_norm { "temporal_sync_norm" } else { "temporal_sync" };
        push(check(label, &mut t, OP_TOLERANCE, min_coords, r)?);
    }

    for kind in [FusionKind::Concat, FusionKind::Sum, FusionKind::NonLocal] {
        let mut fusion = Fusion::<f64>::init(kind, 2, 4, 2, r)?;
        let mut inputs = vec![("f_nuta", random(&[2, 2, 2, 4, 4], r)?), ("f_res", random(&[2, 4, 2, 2, 2], r)?)];
        for (n, w) in fusion.params_mut() {
            inputs.push((n, w.to_param()));
        }
        let mut t = FnTarget::new(inputs, r.gen(), |xs: &[Tensor<f64>]| {
            for ((_, w), x) in fusion.params_mut().into_iter().zip(&xs[2..]) {
                *w = x.clone();
            }
            fuse(&xs[0], &xs[1], &fusion)
        });
        push(check(&format!("fusion_{kind}"), &mut t, OP_TOLERANCE, min_coords, r)?);
    }

    for kind in [FusionKind::Concat, FusionKind::Sum, FusionKind::NonLocal] {
        let cfg = micro_config(kind);
        let net = TwoBranchNet::<f64>::init(&cfg, r)?;
        let clip = random(&[3, 3, cfg.frames, cfg.height, cfg.width], r)?;
        let mut t = NetTarget {
            net,
            clip,
            labels: vec![0, 2, 1],
            seed: r.gen(),
        };
        push(check(&format!("micro_net_{kind}"), &mut t, NET_TOLERANCE, min_coords, r)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative(&[0.0, 0.0], &[1e-12, 0.0]), 1e-12);
        assert!((relative(&[1.0, 0.0], &[1.1, 0.0]) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // the backward pass sees 2x, the probes see 3x
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut calls = 0;
        let mut t = FnTarget::new(vec![("x", random(&[4], &mut rng).unwrap())], 3, |xs: &[Tensor<f64>]| {
            calls += 1;
            xs[0].scale(if calls == 1 { 2.0 } else { 3.0 })
        });
        let r = check("scaled", &mut t, OP_TOLERANCE, 20, &mut rng).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn relu_switch_inside_the_step_is_a_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::param(vec![EPS / 4.0, -0.5, 0.5], [3]).unwrap();
        let mut t = FnTarget::new(vec![("x", x)], 0, |xs: &[Tensor<f64>]| xs[0].relu());
        let r = check("relu", &mut t, OP_TOLERANCE, 20, &mut rng).unwrap();
        assert_eq!(r.leaves[0].kinks, 1);
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn a_kink_does_not_hide_a_wrong_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::param(vec![EPS / 4.0, 0.5], [2]).unwrap();
        let mut calls = 0;
        let mut t = FnTarget::new(vec![("x", x)], 0, |xs: &[Tensor<f64>]| {
            calls += 1;
            xs[0].relu()?.scale(if calls == 1 { 2.0 } else { 1.0 })
        });
        assert!(!check("relu", &mut t, OP_TOLERANCE, 20, &mut rng).unwrap().passed());
    }
}
