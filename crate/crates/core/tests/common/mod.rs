//! Loop-by-loop reference implementations of the aggregation module, written
//! directly from the definitions and sharing no code with the library.

#![allow(dead_code)]

use nuta::nn::{BatchNorm3d, Mode};
use nuta::temporal::{nuta_forward, temporal_sync, NutaParams};
use nuta::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const TOL: f64 = 1e-8;

/// Dense 5D array `[N, C, T, H, W]`.
#[derive(Clone, Debug)]
pub struct Nd {
    pub d: [usize; 5],
    pub v: Vec<f64>,
}

impl Nd {
    pub fn zeros(d: [usize; 5]) -> Self {
        Nd {
            d,
            v: vec![0.0; d.iter().product()],
        }
    }

    pub fn of(t: &Tensor<f64>) -> Self {
        let d = t.dims();
        Nd {
            d: [d[0], d[1], d[2], d[3], d[4]],
            v: t.to_vec(),
        }
    }

    pub fn at(&self, n: usize, c: usize, t: usize, y: usize, x: usize) -> usize {
        let [_, cc, tt, hh, ww] = self.d;
        (((n * cc + c) * tt + t) * hh + y) * ww + x
    }

    pub fn get(&self, n: usize, c: usize, t: usize, y: usize, x: usize) -> f64 {
        self.v[self.at(n, c, t, y, x)]
    }
}

pub fn max_pool_time(f: &Nd) -> Nd {
    let [n, c, t, h, w] = f.d;
    let mut out = Nd::zeros([n, c, t / 2, h, w]);
    for (a, b, i, y, x) in iter5([n, c, t / 2, h, w]) {
        let k = out.at(a, b, i, y, x);
        out.v[k] = f.get(a, b, 2 * i, y, x).max(f.get(a, b, 2 * i + 1, y, x));
    }
    out
}

pub fn iter5(d: [usize; 5]) -> impl Iterator<Item = (usize, usize, usize, usize, usize)> {
    (0..d[0]).flat_map(move |a| {
        (0..d[1]).flat_map(move |b| {
            (0..d[2]).flat_map(move |c| (0..d[3]).flat_map(move |e| (0..d[4]).map(move |g| (a, b, c, e, g))))
        })
    })
}

/// Grouped `(3,1,1)` convolution, stride 1, edge frames repeated at the borders.
pub fn conv_time3(f: &Nd, weight: &Tensor<f64>, groups: usize) -> Nd {
    let [n, cin, t, h, w] = f.d;
    let wd = weight.dims();
    let (cout, per) = (wd[0], wd[1]);
    assert_eq!(wd[2], 3);
    assert_eq!(per * groups, cin);
    let wv = weight.data();
    let out_per = cout / groups;
    let mut out = Nd::zeros([n, cout, t, h, w]);
    for (a, o, i, y, x) in iter5([n, cout, t, h, w]) {
        let g = o / out_per;
        let mut s = 0.0;
        for ci in 0..per {
            for k in 0..3 {
                let src = (i as isize + k as isize - 1).clamp(0, t as isize - 1) as usize;
                s += wv[(o * per + ci) * 3 + k] * f.get(a, g * per + ci, src, y, x);
            }
        }
        let idx = out.at(a, o, i, y, x);
        out.v[idx] = s;
    }
    out
}

pub fn conv_point(f: &Nd, weight: &Tensor<f64>) -> Nd {
    let [n, cin, t, h, w] = f.d;
    let cout = weight.dims()[0];
    let wv = weight.data();
    let mut out = Nd::zeros([n, cout, t, h, w]);
    for (a, o, i, y, x) in iter5([n, cout, t, h, w]) {
        let s: f64 = (0..cin).map(|c| wv[o * cin + c] * f.get(a, c, i, y, x)).sum();
        let idx = out.at(a, o, i, y, x);
        out.v[idx] = s;
    }
    out
}

pub fn norm_eval(f: &Nd, bn: &BatchNorm3d<f64>) -> Nd {
    let mut out = f.clone();
    for (a, c, i, y, x) in iter5(f.d) {
        let k = f.at(a, c, i, y, x);
        out.v[k] = (f.v[k] - bn.running_mean[c]) / (bn.running_var[c] + bn.eps).sqrt() * bn.scale.data()[c]
            + bn.shift.data()[c];
    }
    out
}

/// `m[n][head][i][j]`.
pub type Map = Vec<Vec<Vec<Vec<f64>>>>;

pub fn reference_map(f: &Nd, p: &NutaParams<f64>, heads: usize, scaled: bool) -> Map {
    let [n, c, t, h, w] = f.d;
    let q = conv_time3(&max_pool_time(f), &p.phi.weight, p.phi.groups);
    let k = conv_time3(f, &p.theta.weight, p.theta.groups);
    let ch = c / heads;
    let scale = if scaled { 1.0 / ((ch * h * w) as f64).sqrt() } else { 1.0 };
    (0..n)
        .map(|a| {
            (0..heads)
                .map(|hd| {
                    (0..t / 2)
                        .map(|i| {
                            let logits: Vec<f64> = (0..t)
                                .map(|j| {
                                    let mut s = 0.0;
                                    for cc in hd * ch..(hd + 1) * ch {
                                        for y in 0..h {
                                            for x in 0..w {
                                                s += q.get(a, cc, i, y, x) * k.get(a, cc, j, y, x);
                                            }
                                        }
                                    }
                                    s * scale
                                })
                                .collect();
                            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                            let z: f64 = e.iter().sum();
                            e.into_iter().map(|v| v / z).collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn aggregate(m: &Map, v: &Nd, heads: usize) -> Nd {
    let [n, c, t, h, w] = v.d;
    let ch = c / heads;
    let mut out = Nd::zeros([n, c, t / 2, h, w]);
    for (a, cc, i, y, x) in iter5([n, c, t / 2, h, w]) {
        let row = &m[a][cc / ch][i];
        let s: f64 = (0..t).map(|j| row[j] * v.get(a, cc, j, y, x)).sum();
        let idx = out.at(a, cc, i, y, x);
        out.v[idx] = s;
    }
    out
}

pub fn random(d: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = d.iter().product();
    Tensor::new((0..len).map(|_| rng.sample(StandardNormal)).collect(), d).unwrap()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random geometry: (batch, channels, frames, side, heads, groups, out channels).
pub fn geometry(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize, usize, usize) {
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let c = heads * rng.gen_range(1..=3);
    let groups = if c % 2 == 0 && rng.gen_bool(0.5) { 2 } else { 1 };
    (
        rng.gen_range(1..=2),
        c,
        [2, 4, 6, 8][rng.gen_range(0..4)],
        rng.gen_range(1..=3),
        heads,
        groups,
        rng.gen_range(1..=5),
    )
}

pub fn randomise_norm(bn: &mut BatchNorm3d<f64>, rng: &mut ChaCha8Rng) {
    let c = bn.running_mean.len();
    bn.running_mean = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    bn.running_var = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
    bn.scale = Tensor::param((0..c).map(|_| rng.gen_range(0.5..1.5)).collect(), [c]).unwrap();
    bn.shift = Tensor::param((0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(), [c]).unwrap();
}

pub fn module(rng: &mut ChaCha8Rng, c: usize, out: usize, heads: usize, groups: usize, scaled: bool, norm: bool) -> NutaParams<f64> {
    let mut p = NutaParams::init(c, out, heads, groups, rng).unwrap();
    if scaled {
        p = p.with_scaled_logits();
    }
    if norm {
        p = p.with_norm().unwrap();
        randomise_norm(p.compress_norm.as_mut().unwrap(), rng);
        randomise_norm(p.sync_norm.as_mut().unwrap(), rng);
    }
    p
}

/// Worst absolute differences of the map, the module output and the sync
/// output against the references over `trials` random cases.
pub fn worst_errors(seed: u64, trials: usize) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for trial in 0..trials {
        let (n, c, t, s, heads, groups, out) = geometry(&mut rng);
        let (scaled, norm) = (trial % 2 == 1, trial % 3 == 0);
        let mut p = module(&mut rng, c, out, heads, groups, scaled, norm);
        let f = random([n, c, t, s, s], &mut rng);
        let f_res = random([n, c, t, s, s], &mut rng);
        let fr = Nd::of(&f);
        let map = reference_map(&fr, &p, heads, scaled);

        let (y, m) = nuta_forward(&f, &mut p, Mode::Eval).unwrap();
        let flat: Vec<f64> = map.iter().flatten().flatten().flatten().copied().collect();
        worst[0] = worst[0].max(max_diff(m.tensor().data(), &flat));

        let v = conv_time3(&fr, &p.delta.weight, p.delta.groups);
        let mut expect = conv_point(&aggregate(&map, &v, heads), &p.compress.weight);
        if let Some(bn) = &p.compress_norm {
            expect = norm_eval(&expect, bn);
        }
        worst[1] = worst[1].max(max_diff(y.data(), &expect.v));

        let sync = temporal_sync(&f_res, &m, &mut p, Mode::Eval).unwrap();
        let r = Nd::of(&f_res);
        let z = conv_time3(&r, &p.zeta.weight, p.zeta.groups);
        let mut expect = conv_point(&aggregate(&map, &z, heads), &p.sync.weight);
        if let Some(bn) = &p.sync_norm {
            expect = norm_eval(&expect, bn);
        }
        for (e, q) in expect.v.iter_mut().zip(&max_pool_time(&r).v) {
            *e += q;
        }
        worst[2] = worst[2].max(max_diff(sync.data(), &expect.v));
    }
    worst
}
