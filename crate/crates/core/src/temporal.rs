//! Non-uniform temporal aggregation.
//!
//! A projection map `M [N, heads, T/2, T]` is learned from the feature itself:
//! queries come from a temporally max-pooled copy, keys from the full-rate
//! feature, and a softmax over the source-time axis makes every output step a
//! convex combination of input steps. The same map then aggregates a value
//! path (halving the time axis) and synchronises the uniform branch.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{batchnorm3d, conv3d, temporal_maxpool2, BatchNorm3d, Conv3d, Mode};
use crate::tensor::{Scalar, Tensor};

/// Split of the channel axis into independent attention heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    heads: usize,
}

impl HeadLayout {
    pub fn new(heads: usize) -> Result<Self> {
        if heads == 0 {
            return Err(Error::invalid("head_layout", "zero heads"));
        }
        Ok(HeadLayout { heads })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Channels carried by each head.
    pub fn per_head(&self, channels: usize) -> Result<usize> {
        if channels % self.heads != 0 {
            return Err(Error::invalid(
                "head_layout",
                format!("{} heads do not divide {channels} channels", self.heads),
            ));
        }
        Ok(channels / self.heads)
    }
}

/// `[N, C, T, H, W] -> [N, heads, T, (C / heads) * H * W]`.
pub fn gamma<T: Scalar>(x: &Tensor<T>, layout: HeadLayout) -> Result<Tensor<T>> {
    let [n, c, t, h, w] = x.shape().ncthw("gamma")?;
    let heads = layout.heads();
    let ch = layout.per_head(c)?;
    x.reshape([n, heads, ch, t, h * w])?
        .permute(&[0, 1, 3, 2, 4])?
        .reshape([n, heads, t, ch * h * w])
}

/// Inverse of [`gamma`], given the spatial extents `[H, W]` to restore.
pub fn gamma_inverse<T: Scalar>(x: &Tensor<T>, layout: HeadLayout, spatial: [usize; 2]) -> Result<Tensor<T>> {
    let [n, heads, t, d] = x.dims() else {
        return Err(Error::shape("gamma_inverse", format!("expected [N, heads, T, D], got {}", x.shape())));
    };
    let (n, heads, t, d) = (*n, *heads, *t, *d);
    let hw = spatial[0] * spatial[1];
    if heads != layout.heads() || d % hw != 0 {
        return Err(Error::shape(
            "gamma_inverse",
            format!("{} does not split into {} heads over {spatial:?}", x.shape(), layout.heads()),
        ));
    }
    let ch = d / hw;
    x.reshape([n, heads, t, ch, hw])?
        .permute(&[0, 1, 3, 2, 4])?
        .reshape([n, heads * ch, t, spatial[0], spatial[1]])
}

/// Row-stochastic temporal map `[N, heads, T_out, T_src]`.
#[derive(Clone, Debug)]
pub struct ProjectionMap<T: Scalar>(Tensor<T>);

impl<T: Scalar> ProjectionMap<T> {
    /// Softmax over the source-time axis of raw logits.
    pub fn from_logits(logits: &Tensor<T>) -> Result<Self> {
        if logits.shape().rank() != 4 {
            return Err(Error::shape("projection_map", format!("logits must be rank 4, got {}", logits.shape())));
        }
        Ok(ProjectionMap(logits.softmax_lastdim()?))
    }

    /// Wraps an explicit map after checking row-stochasticity.
    pub fn from_tensor(m: Tensor<T>, tol: f64) -> Result<Self> {
        if m.shape().rank() != 4 {
            return Err(Error::shape("projection_map", format!("map must be rank 4, got {}", m.shape())));
        }
        let map = ProjectionMap(m);
        if let Some(err) = map.max_row_error() {
            if err > tol || map.0.data().iter().any(|&v| v < T::zero() || v > T::one()) {
                return Err(Error::invalid("projection_map", format!("not row-stochastic (row error {err:e})")));
            }
        }
        Ok(map)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn heads(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn out_steps(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn source_steps(&self) -> usize {
        self.0.dims()[3]
    }

    pub fn row(&self, n: usize, head: usize, step: usize) -> &[T] {
        let s = self.source_steps();
        let start = ((n * self.heads() + head) * self.out_steps() + step) * s;
        &self.0.data()[start..start + s]
    }

    /// The `[T_out, T_src]` slice for one sample and head.
    pub fn head_slice(&self, n: usize, head: usize) -> &[T] {
        let len = self.out_steps() * self.source_steps();
        let start = (n * self.heads() + head) * len;
        &self.0.data()[start..start + len]
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_error(&self) -> Option<f64> {
        self.0
            .data()
            .chunks(self.source_steps())
            .map(|r| (r.iter().copied().sum::<T>().as_f64() - 1.0).abs())
            .reduce(f64::max)
    }
}

/// Learned weights of one aggregation module.
#[derive(Clone, Debug)]
pub struct NutaParams<T: Scalar> {
    /// Query path, applied after temporal max-pooling.
    pub phi: Conv3d<T>,
    /// Key path.
    pub theta: Conv3d<T>,
    /// Value path of the non-uniform branch.
    pub delta: Conv3d<T>,
    /// Value path used to synchronise the uniform branch.
    pub zeta: Conv3d<T>,
    /// `1x1x1` channel compression of the aggregated feature.
    pub compress: Conv3d<T>,
    /// `1x1x1` projection of the synchronised uniform feature (keeps width).
    pub sync: Conv3d<T>,
    /// Multiplies the association scores by `1/sqrt(d)`, with `d` the per-head
    /// feature length, before the softmax.
    pub scaled_logits: bool,
    /// Optional batch norm after `compress`.
    pub compress_norm: Option<BatchNorm3d<T>>,
    /// Optional batch norm after `sync`, before the pooled residual is added.
    pub sync_norm: Option<BatchNorm3d<T>>,
    pub layout: HeadLayout,
}

impl<T: Scalar> NutaParams<T> {
    /// `(3,1,1)` bias-free grouped convolutions for phi/theta/delta/zeta.
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        out_channels: usize,
        heads: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layout = HeadLayout::new(heads)?;
        layout.per_head(channels)?;
        if channels % groups != 0 {
            return Err(Error::invalid("nuta", format!("groups {groups} do not divide {channels} channels")));
        }
        Ok(NutaParams {
            phi: Conv3d::temporal3(channels, channels, groups, rng)?,
            theta: Conv3d::temporal3(channels, channels, groups, rng)?,
            delta: Conv3d::temporal3(channels, channels, groups, rng)?,
            zeta: Conv3d::temporal3(channels, channels, groups, rng)?,
            compress: Conv3d::pointwise(channels, out_channels, rng)?,
            sync: Conv3d::pointwise(channels, channels, rng)?,
            scaled_logits: false,
            compress_norm: None,
            sync_norm: None,
            layout,
        })
    }

    /// Adds batch norm after both trailing `1x1x1` convolutions.
    pub fn with_norm(mut self) -> Result<Self> {
        self.compress_norm = Some(BatchNorm3d::new(self.out_channels())?);
        self.sync_norm = Some(BatchNorm3d::new(self.channels())?);
        Ok(self)
    }

    pub fn with_scaled_logits(mut self) -> Self {
        self.scaled_logits = true;
        self
    }

    /// Zeroes the query weights, so the map starts out uniform (`1/T` everywhere)
    /// and softmax gradients are not saturated at initialisation.
    pub fn with_uniform_start(mut self) -> Result<Self> {
        let w = &self.phi.weight;
        self.phi.weight = Tensor::param(vec![T::zero(); w.numel()], w.shape().clone())?;
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.theta.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.compress.out_channels()
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (name, conv) in [
            ("phi", &mut self.phi),
            ("theta", &mut self.theta),
            ("delta", &mut self.delta),
            ("zeta", &mut self.zeta),
            ("compress", &mut self.compress),
            ("sync", &mut self.sync),
        ] {
            out.extend(conv.params_mut().into_iter().map(|p| (name, p)));
        }
        for (name, bn) in [("compress_norm", &mut self.compress_norm), ("sync_norm", &mut self.sync_norm)] {
            if let Some(bn) = bn {
                out.extend(bn.params_mut().into_iter().map(|p| (name, p)));
            }
        }
        out
    }
}

fn check_input<T: Scalar>(f: &Tensor<T>, p: &NutaParams<T>) -> Result<[usize; 5]> {
    let dims = f.shape().ncthw("nuta")?;
    if dims[2] % 2 != 0 {
        return Err(Error::shape("nuta", format!("temporal extent {} is odd", dims[2])));
    }
    p.layout.per_head(dims[1])?;
    Ok(dims)
}

/// Pre-softmax association scores `[N, heads, T/2, T]`.
pub fn projection_logits<T: Scalar>(f: &Tensor<T>, p: &NutaParams<T>) -> Result<Tensor<T>> {
    check_input(f, p)?;
    let query = gamma(&conv3d(&temporal_maxpool2(f)?, &p.phi)?, p.layout)?;
    let key = gamma(&conv3d(f, &p.theta)?, p.layout)?;
    let logits = query.matmul(&key.transpose_last2()?)?;
    if p.scaled_logits {
        let d = key.dims()[3] as f64;
        logits.scale(d.sqrt().recip())
    } else {
        Ok(logits)
    }
}

pub fn projection_map<T: Scalar>(f: &Tensor<T>, p: &NutaParams<T>) -> Result<ProjectionMap<T>> {
    ProjectionMap::from_logits(&projection_logits(f, p)?)
}

/// Contracts the source-time axis of `value [N, C, T, H, W]` with `m`,
/// head by head: `[N, C, T_out, H, W]`.
pub fn temporal_aggregate<T: Scalar>(m: &ProjectionMap<T>, value: &Tensor<T>, layout: HeadLayout) -> Result<Tensor<T>> {
    let [n, _, t, h, w] = value.shape().ncthw("temporal_aggregate")?;
    if m.heads() != layout.heads() || m.batch() != n || m.source_steps() != t {
        return Err(Error::ShapeMismatch {
            op: "temporal_aggregate",
            lhs: m.tensor().shape().clone(),
            rhs: value.shape().clone(),
        });
    }
    let v = gamma(value, layout)?;
    gamma_inverse(&m.tensor().matmul(&v)?, layout, [h, w])
}

fn maybe_norm<T: Scalar>(x: Tensor<T>, bn: Option<&mut BatchNorm3d<T>>, mode: Mode) -> Result<Tensor<T>> {
    match bn {
        Some(bn) => batchnorm3d(&x, bn, mode.is_train()),
        None => Ok(x),
    }
}

/// Non-uniform branch output `[N, C_out, T/2, H, W]` and the map that made it.
/// `mode` only matters when the module carries batch norm.
pub fn nuta_forward<T: Scalar>(
    f: &Tensor<T>,
    p: &mut NutaParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, ProjectionMap<T>)> {
    let m = projection_map(f, p)?;
    let aggregated = temporal_aggregate(&m, &conv3d(f, &p.delta)?, p.layout)?;
    let out = maybe_norm(conv3d(&aggregated, &p.compress)?, p.compress_norm.as_mut(), mode)?;
    Ok((out, m))
}

/// Re-samples the uniform-branch feature with the same map, plus a
/// temporally max-pooled residual: `[N, C, T/2, H, W]`.
pub fn temporal_sync<T: Scalar>(
    f_res: &Tensor<T>,
    m: &ProjectionMap<T>,
    p: &mut NutaParams<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    check_input(f_res, p)?;
    if m.heads() != p.layout.heads() {
        return Err(Error::invalid(
            "temporal_sync",
            format!("map has {} heads, module expects {}", m.heads(), p.layout.heads()),
        ));
    }
    let aggregated = temporal_aggregate(m, &conv3d(f_res, &p.zeta)?, p.layout)?;
    maybe_norm(conv3d(&aggregated, &p.sync)?, p.sync_norm.as_mut(), mode)?.add(&temporal_maxpool2(f_res)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(dims: [usize; 5]) -> Tensor<f64> {
        let len = dims.iter().product();
        Tensor::new((0..len).map(|i| ((i * 31 % 97) as f64 * 0.173).sin()).collect(), dims).unwrap()
    }

    #[test]
    fn gamma_single_head_keeps_channel_time_content() {
        let x = ramp([2, 3, 4, 2, 2]);
        let g = gamma(&x, HeadLayout::new(1).unwrap()).unwrap();
        assert_eq!(g.dims(), &[2, 1, 4, 12]);
        // element (n, c, t, s) lands at (n, 0, t, c * HW + s)
        assert_eq!(g.data()[(4 + 3) * 12 + 2 * 4 + 1], x.data()[((1 * 3 + 2) * 4 + 3) * 4 + 1]);
    }

    #[test]
    fn gamma_max_split_gives_channel_series() {
        let x = ramp([1, 4, 6, 1, 1]);
        let g = gamma(&x, HeadLayout::new(4).unwrap()).unwrap();
        assert_eq!(g.dims(), &[1, 4, 6, 1]);
        assert_eq!(g.data(), x.data());
    }

    #[test]
    fn gamma_roundtrip_is_bitwise() {
        let x = ramp([2, 8, 4, 3, 2]);
        let layout = HeadLayout::new(4).unwrap();
        let back = gamma_inverse(&gamma(&x, layout).unwrap(), layout, [3, 2]).unwrap();
        assert_eq!(back.dims(), x.dims());
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn gamma_rejects_indivisible_channels() {
        assert!(gamma(&ramp([1, 6, 2, 1, 1]), HeadLayout::new(4).unwrap()).is_err());
    }

    #[test]
    fn constant_feature_gives_uniform_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = NutaParams::<f64>::init(8, 8, 2, 4, &mut rng).unwrap();
        let f = Tensor::full([1, 8, 6, 2, 2], 0.4).unwrap();
        let m = projection_map(&f, &p).unwrap();
        assert!(m.tensor().data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-12));
    }

    #[test]
    fn map_shape_for_sixty_four_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = NutaParams::<f64>::init(64, 64, 4, 64, &mut rng).unwrap();
        let m = projection_map(&ramp([1, 64, 8, 4, 4]), &p).unwrap();
        assert_eq!(m.tensor().dims(), &[1, 4, 4, 8]);
        assert!(m.max_row_error().unwrap() < 1e-12);
    }

    #[test]
    fn forward_halves_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = NutaParams::<f64>::init(16, 12, 4, 8, &mut rng).unwrap().with_norm().unwrap();
        let f = ramp([2, 16, 8, 4, 4]);
        let (out, m) = nuta_forward(&f, &mut p, Mode::Train).unwrap();
        assert_eq!(out.dims(), &[2, 12, 4, 4, 4]);
        let synced = temporal_sync(&f, &m, &mut p, Mode::Train).unwrap();
        assert_eq!(synced.dims(), &[2, 16, 4, 4, 4]);
    }

    #[test]
    fn odd_time_and_head_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = NutaParams::<f64>::init(8, 8, 2, 2, &mut rng).unwrap();
        assert!(projection_map(&ramp([1, 8, 5, 1, 1]), &p).is_err());
        let mut q = NutaParams::<f64>::init(8, 8, 4, 2, &mut rng).unwrap();
        let f = ramp([1, 8, 4, 1, 1]);
        let m = projection_map(&f, &p).unwrap();
        assert!(temporal_sync(&f, &m, &mut q, Mode::Eval).is_err());
    }
}
