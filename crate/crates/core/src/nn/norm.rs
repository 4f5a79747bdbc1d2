use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-channel batch normalisation state.
#[derive(Clone, Debug)]
pub struct BatchNorm3d<T: Scalar> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm3d<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm3d {
            scale: Tensor::param(vec![T::one(); channels], [channels])?,
            shift: Tensor::param(vec![T::zero(); channels], [channels])?,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.scale, &mut self.shift]
    }
}

/// Normalises over every axis but 1. In train mode batch statistics are used
/// and folded into the running estimates; eval mode uses the running estimates.
pub fn batchnorm3d<T: Scalar>(x: &Tensor<T>, p: &mut BatchNorm3d<T>, train: bool) -> Result<Tensor<T>> {
    let d = x.dims();
    if d.len() < 2 || d[1] != p.channels() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm3d",
            lhs: x.shape().clone(),
            rhs: p.scale.shape().clone(),
        });
    }
    let (n, c) = (d[0], d[1]);
    let inner: usize = d[2..].iter().product();
    let count = n * inner;
    let eps = T::of(p.eps);
    let xd = x.data();

    let (mean, var) = if train {
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for (i, chunk) in xd.chunks(inner).enumerate() {
            mean[i % c] += chunk.iter().copied().sum::<T>();
        }
        mean.iter_mut().for_each(|m| *m = *m / T::of(count as f64));
        for (i, chunk) in xd.chunks(inner).enumerate() {
            let m = mean[i % c];
            var[i % c] += chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
        var.iter_mut().for_each(|v| *v = *v / T::of(count as f64));
        let mom = T::of(p.momentum);
        let unbias = if count > 1 { T::of(count as f64 / (count - 1) as f64) } else { T::one() };
        for ch in 0..c {
            p.running_mean[ch] = (T::one() - mom) * p.running_mean[ch] + mom * mean[ch];
            p.running_var[ch] = (T::one() - mom) * p.running_var[ch] + mom * var[ch] * unbias;
        }
        (mean, var)
    } else {
        (p.running_mean.clone(), p.running_var.clone())
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (gamma, beta) = (p.scale.data(), p.shift.data());
    let mut xhat = Vec::with_capacity(xd.len());
    let mut out = Vec::with_capacity(xd.len());
    for (i, chunk) in xd.chunks(inner).enumerate() {
        let ch = i % c;
        for &v in chunk {
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(gamma[ch] * h + beta[ch]);
        }
    }
    let gamma = gamma.to_vec();
    let inputs = vec![x.clone(), p.scale.clone(), p.shift.clone()];
    Tensor::from_op("batchnorm3d", x.shape().clone(), out, inputs, move |ctx| {
        let g = ctx.grad;
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (i, (gc, hc)) in g.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
            let ch = i % c;
            for (&gv, &hv) in gc.iter().zip(hc) {
                dbeta[ch] += gv;
                dgamma[ch] += gv * hv;
            }
        }
        let dx = ctx.needs[0].then(|| {
            let mut dx = Vec::with_capacity(g.len());
            let m = T::of(count as f64);
            for (i, (gc, hc)) in g.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                let ch = i % c;
                let k = gamma[ch] * inv_std[ch];
                if train {
                    let (sg, sgh) = (dbeta[ch] / m, dgamma[ch] / m);
                    dx.extend(gc.iter().zip(hc).map(|(&gv, &hv)| k * (gv - sg - hv * sgh)));
                } else {
                    dx.extend(gc.iter().map(|&gv| k * gv));
                }
            }
            dx
        });
        vec![dx, ctx.needs[1].then_some(dgamma), ctx.needs[2].then_some(dbeta)]
    })
}
