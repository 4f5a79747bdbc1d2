use rand::Rng;

use super::{gemm, macs, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().clone(),
            rhs: b.shape().clone(),
        });
    }
    Ok(())
}

/// Gathers `src` (with `dims`) into the axis order `order`.
fn permute_data<T: Scalar>(src: &[T], dims: &[usize], order: &[usize]) -> Vec<T> {
    let rank = dims.len();
    let in_strides = Shape(dims.to_vec()).strides();
    let out_dims: Vec<usize> = order.iter().map(|&a| dims[a]).collect();
    let step: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    if rank == 0 {
        out.extend_from_slice(src);
        return out;
    }
    let inner = out_dims[rank - 1];
    let inner_step = step[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    'outer: loop {
        let mut off = base;
        for _ in 0..inner {
            out.push(src[off]);
            off += inner_step;
        }
        // advance every axis but the last
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                break 'outer;
            }
            ax -= 1;
            idx[ax] += 1;
            base += step[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            base -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        let shape = Shape::new(dims.clone()).map_err(|_| Error::ElementCount {
            from: self.shape().clone(),
            from_numel: self.numel(),
            to: dims.clone(),
        })?;
        if shape.numel() != self.numel() {
            return Err(Error::ElementCount {
                from: self.shape().clone(),
                from_numel: self.numel(),
                to: dims,
            });
        }
        Tensor::from_op("reshape", shape, self.to_vec(), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        })
    }

    /// Reorders axes: output axis `i` is input axis `order[i]`.
    pub fn permute(&self, order: &[usize]) -> Result<Self> {
        let rank = self.shape().rank();
        let mut seen = vec![false; rank];
        let valid = order.len() == rank
            && order.iter().all(|&a| a < rank && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::InvalidPermutation {
                order: order.to_vec(),
                rank,
            });
        }
        let dims = self.dims().to_vec();
        let out_dims: Vec<usize> = order.iter().map(|&a| dims[a]).collect();
        let mut inverse = vec![0; rank];
        for (i, &a) in order.iter().enumerate() {
            inverse[a] = i;
        }
        let data = permute_data(self.data(), &dims, order);
        let out_dims_c = out_dims.clone();
        Tensor::from_op("permute", Shape(out_dims), data, vec![self.clone()], move |ctx| {
            vec![Some(permute_data(ctx.grad, &out_dims_c, &inverse))]
        })
    }

    pub fn transpose_last2(&self) -> Result<Self> {
        let rank = self.shape().rank();
        if rank < 2 {
            return Err(Error::shape("transpose", format!("rank {rank} < 2")));
        }
        let mut order: Vec<usize> = (0..rank).collect();
        order.swap(rank - 1, rank - 2);
        self.permute(&order)
    }

    /// Batched matrix product `[.., P, K] x [.., K, Q] -> [.., P, Q]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (ad, bd) = (self.dims(), rhs.dims());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().clone(),
            rhs: rhs.shape().clone(),
        };
        if ad.len() < 2 || ad.len() != bd.len() {
            return Err(mismatch());
        }
        let r = ad.len();
        let (p, k, q) = (ad[r - 2], ad[r - 1], bd[r - 1]);
        if bd[r - 2] != k || ad[..r - 2] != bd[..r - 2] {
            return Err(mismatch());
        }
        let batch: usize = ad[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * p * q];
        for bi in 0..batch {
            gemm(
                p,
                k,
                q,
                (&self.data()[bi * p * k..], k, 1),
                (&rhs.data()[bi * k * q..], q, 1),
                (&mut out[bi * p * q..], q, 1),
                false,
            );
        }
        let mut dims = ad[..r - 2].to_vec();
        dims.extend([p, q]);
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_op("matmul", Shape(dims), out, vec![self.clone(), rhs.clone()], move |ctx| {
            let ga = ctx.needs[0].then(|| {
                let mut ga = vec![T::zero(); batch * p * k];
                for bi in 0..batch {
                    // dA = dC * B^T
                    gemm(
                        p,
                        q,
                        k,
                        (&ctx.grad[bi * p * q..], q, 1),
                        (&b.data()[bi * k * q..], 1, q),
                        (&mut ga[bi * p * k..], k, 1),
                        false,
                    );
                }
                ga
            });
            let gb = ctx.needs[1].then(|| {
                let mut gb = vec![T::zero(); batch * k * q];
                for bi in 0..batch {
                    // dB = A^T * dC
                    gemm(
                        k,
                        p,
                        q,
                        (&a.data()[bi * p * k..], 1, k),
                        (&ctx.grad[bi * p * q..], q, 1),
                        (&mut gb[bi * k * q..], q, 1),
                        false,
                    );
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// Softmax over the last axis, stabilised by subtracting the row max.
    pub fn softmax_lastdim(&self) -> Result<Self> {
        let len = *self
            .dims()
            .last()
            .ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let mut out = self.to_vec();
        for row in out.chunks_mut(len) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        macs::record(out.len() as u64);
        Tensor::from_op("softmax", self.shape().clone(), out, vec![self.clone()], move |ctx| {
            let mut gx = vec![T::zero(); ctx.grad.len()];
            for ((gx, g), y) in gx
                .chunks_mut(len)
                .zip(ctx.grad.chunks(len))
                .zip(ctx.output.chunks(len))
            {
                let dot: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                for ((gx, &g), &y) in gx.iter_mut().zip(g).zip(y) {
                    *gx = y * (g - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Concatenates along axis 1 (channels). All other extents must match.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        let (ad, bd) = (self.dims(), other.dims());
        if ad.len() < 2 || ad.len() != bd.len() || ad[0] != bd[0] || ad[2..] != bd[2..] {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: self.shape().clone(),
                rhs: other.shape().clone(),
            });
        }
        let inner: usize = ad[2..].iter().product();
        let (ca, cb) = (ad[1] * inner, bd[1] * inner);
        let mut out = Vec::with_capacity(self.numel() + other.numel());
        for n in 0..ad[0] {
            out.extend_from_slice(&self.data()[n * ca..(n + 1) * ca]);
            out.extend_from_slice(&other.data()[n * cb..(n + 1) * cb]);
        }
        let mut dims = ad.to_vec();
        dims[1] += bd[1];
        let batch = ad[0];
        Tensor::from_op("concat_channels", Shape(dims), out, vec![self.clone(), other.clone()], move |ctx| {
            let stride = ca + cb;
            let ga = ctx.needs[0].then(|| {
                (0..batch)
                    .flat_map(|n| ctx.grad[n * stride..n * stride + ca].iter().copied())
                    .collect()
            });
            let gb = ctx.needs[1].then(|| {
                (0..batch)
                    .flat_map(|n| ctx.grad[n * stride + ca..(n + 1) * stride].iter().copied())
                    .collect()
            });
            vec![ga, gb]
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        same_shape("add", self, rhs)?;
        let out = self.data().iter().zip(rhs.data()).map(|(&a, &b)| a + b).collect();
        Tensor::from_op("add", self.shape().clone(), out, vec![self.clone(), rhs.clone()], |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.to_vec()),
                ctx.needs[1].then(|| ctx.grad.to_vec()),
            ]
        })
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        same_shape("sub", self, rhs)?;
        let out = self.data().iter().zip(rhs.data()).map(|(&a, &b)| a - b).collect();
        Tensor::from_op("sub", self.shape().clone(), out, vec![self.clone(), rhs.clone()], |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.to_vec()),
                ctx.needs[1].then(|| ctx.grad.iter().map(|&g| -g).collect()),
            ]
        })
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        same_shape("mul", self, rhs)?;
        let out = self.data().iter().zip(rhs.data()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_op("mul", self.shape().clone(), out, vec![self.clone(), rhs.clone()], move |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.iter().zip(b.data()).map(|(&g, &b)| g * b).collect()),
                ctx.needs[1].then(|| ctx.grad.iter().zip(a.data()).map(|(&g, &a)| g * a).collect()),
            ]
        })
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        let s = T::of(s);
        let out = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op("scale", self.shape().clone(), out, vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.iter().map(|&g| g * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Result<Self> {
        let s = T::of(s);
        let out = self.data().iter().map(|&v| v + s).collect();
        Tensor::from_op("add_scalar", self.shape().clone(), out, vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        })
    }

    /// Adds a per-channel bias `[C]` along axis 1.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        let d = self.dims();
        if d.len() < 2 || bias.dims() != [d[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().clone(),
                rhs: bias.shape().clone(),
            });
        }
        let c = d[1];
        let inner: usize = d[2..].iter().product();
        let mut out = self.to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let b = bias.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Tensor::from_op("add_bias", self.shape().clone(), out, vec![self.clone(), bias.clone()], move |ctx| {
            let gb = ctx.needs[1].then(|| {
                let mut gb = vec![T::zero(); c];
                for (i, chunk) in ctx.grad.chunks(inner).enumerate() {
                    gb[i % c] += chunk.iter().copied().sum::<T>();
                }
                gb
            });
            vec![ctx.needs[0].then(|| ctx.grad.to_vec()), gb]
        })
    }

    pub fn relu(&self) -> Result<Self> {
        let out = self.data().iter().map(|&v| v.max(T::zero())).collect();
        Tensor::from_op("relu", self.shape().clone(), out, vec![self.clone()], |ctx| {
            let g = ctx
                .grad
                .iter()
                .zip(ctx.output)
                .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                .collect();
            vec![Some(g)]
        })
    }

    /// Inverted dropout: in train mode zeroes each element with probability
    /// `ratio` and scales survivors by `1 / (1 - ratio)`; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&self, ratio: f64, train: bool, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::invalid("dropout", format!("ratio {ratio} outside [0, 1)")));
        }
        if !train || ratio == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::of(1.0 / (1.0 - ratio));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < ratio { T::zero() } else { keep })
            .collect();
        let out = self.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        Tensor::from_op("dropout", self.shape().clone(), out, vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.iter().zip(&mask).map(|(&g, &m)| g * m).collect())]
        })
    }

    pub fn sum(&self) -> Result<Self> {
        let total: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op("sum", Shape::scalar(), vec![total], vec![self.clone()], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean(&self) -> Result<Self> {
        self.mean_lastdims(self.shape().rank())
    }

    /// Mean over the trailing `k` axes.
    pub fn mean_lastdims(&self, k: usize) -> Result<Self> {
        let rank = self.shape().rank();
        if k > rank {
            return Err(Error::shape("mean_lastdims", format!("cannot reduce {k} axes of {}", self.shape())));
        }
        let inner: usize = self.dims()[rank - k..].iter().product();
        let scale = T::of(1.0 / inner as f64);
        let out = self
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<T>() * scale)
            .collect();
        let shape = Shape(self.dims()[..rank - k].to_vec());
        Tensor::from_op("mean_lastdims", shape, out, vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.iter().flat_map(|&g| std::iter::repeat(g * scale).take(inner)).collect())]
        })
    }

    /// `sum(self * weights)` against a constant weight vector.
    pub fn dot_const(&self, weights: &[T]) -> Result<Self> {
        if weights.len() != self.numel() {
            return Err(Error::invalid("dot_const", "weight length differs from element count"));
        }
        let w = Tensor::new(weights.to_vec(), self.shape().clone())?;
        self.mul(&w)?.sum()
    }
}
