use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Max over non-overlapping temporal pairs. Ties route the gradient to the
/// earlier frame.
pub fn temporal_maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, t, h, w] = x.shape().ncthw("temporal_maxpool2")?;
    if t % 2 != 0 {
        return Err(Error::shape("temporal_maxpool2", format!("temporal extent {t} is odd")));
    }
    let plane = h * w;
    let to = t / 2;
    let mut out = Vec::with_capacity(x.numel() / 2);
    let mut argmax = Vec::with_capacity(x.numel() / 2);
    let xd = x.data();
    for nc in 0..n * c {
        let base = nc * t * plane;
        for ot in 0..to {
            let a = base + 2 * ot * plane;
            let b = a + plane;
            for i in 0..plane {
                let (va, vb) = (xd[a + i], xd[b + i]);
                if vb > va {
                    out.push(vb);
                    argmax.push(b + i);
                } else {
                    out.push(va);
                    argmax.push(a + i);
                }
            }
        }
    }
    let len = x.numel();
    let shape = Shape::new(vec![n, c, to, h, w])?;
    Tensor::from_op("temporal_maxpool2", shape, out, vec![x.clone()], move |ctx| {
        let mut g = vec![T::zero(); len];
        for (&src, &dy) in argmax.iter().zip(ctx.grad) {
            g[src] += dy;
        }
        vec![Some(g)]
    })
}

/// Spatial mean over non-overlapping `factor x factor` windows.
pub fn spatial_avgpool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, t, h, w] = x.shape().ncthw("spatial_avgpool")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "spatial_avgpool",
            format!("spatial extent {h}x{w} not divisible by {factor}"),
        ));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h / factor, w / factor);
    let scale = T::of(1.0 / (factor * factor) as f64);
    let frames = n * c * t;
    let mut out = vec![T::zero(); frames * ho * wo];
    let xd = x.data();
    for f in 0..frames {
        for i in 0..h {
            let src = &xd[(f * h + i) * w..(f * h + i + 1) * w];
            let dst = &mut out[(f * ho + i / factor) * wo..(f * ho + i / factor + 1) * wo];
            for (j, &v) in src.iter().enumerate() {
                dst[j / factor] += v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    let shape = Shape::new(vec![n, c, t, ho, wo])?;
    Tensor::from_op("spatial_avgpool", shape, out, vec![x.clone()], move |ctx| {
        let mut g = vec![T::zero(); frames * h * w];
        for f in 0..frames {
            for i in 0..h {
                let src = &ctx.grad[(f * ho + i / factor) * wo..];
                for j in 0..w {
                    g[(f * h + i) * w + j] = src[j / factor] * scale;
                }
            }
        }
        vec![Some(g)]
    })
}

pub fn spatial_avgpool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    spatial_avgpool(x, 2)
}

/// Mean over `(T, H, W)`: `[N, C, T, H, W] -> [N, C]`.
pub fn global_avgpool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.shape().ncthw("global_avgpool")?;
    x.mean_lastdims(3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_pairs() {
        let x = Tensor::<f64>::new(vec![1.0, 3.0, 2.0, 5.0], [1, 1, 4, 1, 1]).unwrap();
        assert_eq!(temporal_maxpool2(&x).unwrap().data(), &[3.0, 5.0]);
        let odd = Tensor::<f64>::zeros([1, 1, 3, 1, 1]).unwrap();
        assert!(temporal_maxpool2(&odd).is_err());
    }

    #[test]
    fn maxpool_ties_go_to_earlier_frame() {
        let x = Tensor::<f64>::param(vec![2.0, 2.0], [1, 1, 2, 1, 1]).unwrap();
        temporal_maxpool2(&x).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn avgpool_block_mean() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], [1, 1, 1, 2, 2]).unwrap();
        assert_eq!(spatial_avgpool2(&x).unwrap().data(), &[2.5]);
        let odd = Tensor::<f64>::zeros([1, 1, 1, 3, 2]).unwrap();
        assert!(spatial_avgpool2(&odd).is_err());
    }

    #[test]
    fn constant_inputs_stay_constant() {
        let x = Tensor::<f64>::full([2, 3, 4, 4, 4], 0.7).unwrap();
        assert!(temporal_maxpool2(&x).unwrap().data().iter().all(|&v| v == 0.7));
        assert!(spatial_avgpool2(&x).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert_eq!(global_avgpool(&x).unwrap().dims(), &[2, 3]);
    }
}
