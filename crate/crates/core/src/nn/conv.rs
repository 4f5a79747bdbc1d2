use rand::Rng;

use super::init;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Shape, Tensor};

/// How the temporal axis is padded. Spatial padding is always zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TemporalPad {
    #[default]
    Zeros,
    /// Repeat the first/last frame, so a temporally constant input stays constant.
    Replicate,
}

/// Grouped 3D convolution parameters. Weight layout is
/// `[Cout, Cin / groups, kT, kH, kW]`.
#[derive(Clone, Debug)]
pub struct Conv3d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
    pub temporal_pad: TemporalPad,
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: [usize; 3],
        padding: [usize; 3],
        groups: usize,
    ) -> Result<Self> {
        let wd = weight.dims();
        if wd.len() != 5 {
            return Err(Error::shape("conv3d", format!("weight must be rank 5, got {}", weight.shape())));
        }
        if groups == 0 || wd[0] % groups != 0 {
            return Err(Error::invalid(
                "conv3d",
                format!("groups {groups} does not divide {} output channels", wd[0]),
            ));
        }
        if stride.contains(&0) {
            return Err(Error::invalid("conv3d", "zero stride"));
        }
        if let Some(b) = &bias {
            if b.dims() != [wd[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv3d",
                    lhs: weight.shape().clone(),
                    rhs: b.shape().clone(),
                });
            }
        }
        Ok(Conv3d {
            weight,
            bias,
            stride,
            padding,
            groups,
            temporal_pad: TemporalPad::Zeros,
        })
    }

    pub fn with_temporal_pad(mut self, pad: TemporalPad) -> Self {
        self.temporal_pad = pad;
        self
    }

    /// Kaiming-normal weights (fan-in), zero bias if requested.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if groups == 0 || cin % groups != 0 {
            return Err(Error::invalid(
                "conv3d",
                format!("groups {groups} does not divide {cin} input channels"),
            ));
        }
        let fan_in = cin / groups * kernel.iter().product::<usize>();
        let dims = [cout, cin / groups, kernel[0], kernel[1], kernel[2]];
        let weight = Tensor::param(init::kaiming_normal(dims.iter().product(), fan_in, rng), dims)?;
        let bias = if bias { Some(Tensor::param(vec![T::zero(); cout], [cout])?) } else { None };
        Self::new(weight, bias, stride, padding, groups)
    }

    /// Bias-free `(3,1,1)` convolution with edge-replicated "same" temporal padding.
    pub fn temporal3<R: Rng + ?Sized>(cin: usize, cout: usize, groups: usize, rng: &mut R) -> Result<Self> {
        Ok(Self::init(cin, cout, [3, 1, 1], [1, 1, 1], [1, 0, 0], groups, false, rng)?
            .with_temporal_pad(TemporalPad::Replicate))
    }

    /// Bias-free `1x1x1` convolution.
    pub fn pointwise<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        Self::init(cin, cout, [1, 1, 1], [1, 1, 1], [0, 0, 0], 1, false, rng)
    }

    /// `1x1x1` identity map on `c` channels.
    pub fn identity(c: usize) -> Result<Self> {
        let mut w = vec![T::zero(); c * c];
        for i in 0..c {
            w[i * c + i] = T::one();
        }
        Self::new(Tensor::param(w, [c, c, 1, 1, 1])?, None, [1; 3], [0; 3], 1)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> [usize; 3] {
        let d = self.weight.dims();
        [d[2], d[3], d[4]]
    }

    /// Output `[T', H', W']` for an input `[T, H, W]`.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let k = self.kernel();
        let mut out = [0; 3];
        for i in 0..3 {
            let padded = input[i] + 2 * self.padding[i];
            if padded < k[i] {
                return Err(Error::shape(
                    "conv3d",
                    format!("kernel {k:?} exceeds padded input {input:?} on axis {i}"),
                ));
            }
            out[i] = (padded - k[i]) / self.stride[i] + 1;
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv3d(x, self)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.weight];
        out.extend(self.bias.as_mut());
        out
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin_g: usize,
    inp: [usize; 3],
    out: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
    replicate_t: bool,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin_g * self.k.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.out.iter().product()
    }

    fn in_len(&self) -> usize {
        self.inp.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.k == [1; 3] && self.s == [1; 3] && self.p == [0; 3]
    }

    /// Visits every output line (fixed kernel tap, `t`, `h`) of one input
    /// channel. `f(offset, taps)` gets the line's offset into the column
    /// matrix and, when the line touches the input, `(lo, hi, start)`: the
    /// in-bounds output range along `w` and the input index at `w = lo`.
    #[inline]
    fn for_each_line(&self, mut f: impl FnMut(usize, Option<(usize, usize, usize)>)) {
        let [it, ih, iw] = self.inp;
        let [ot, oh, ow] = self.out;
        let cols = self.cols();
        let mut row = 0;
        for dt in 0..self.k[0] {
            for dh in 0..self.k[1] {
                for dw in 0..self.k[2] {
                    // w is in bounds for lo <= w < hi
                    let lo = self.p[2].saturating_sub(dw).div_ceil(self.s[2]).min(ow);
                    let hi = (iw + self.p[2]).saturating_sub(dw).div_ceil(self.s[2]).clamp(lo, ow);
                    let mut offset = row * cols;
                    for t in 0..ot {
                        let mut ti = (t * self.s[0] + dt) as isize - self.p[0] as isize;
                        if self.replicate_t {
                            ti = ti.clamp(0, it as isize - 1);
                        }
                        for h in 0..oh {
                            let hi_ = (h * self.s[1] + dh) as isize - self.p[1] as isize;
                            let inside = ti >= 0 && (ti as usize) < it && hi_ >= 0 && (hi_ as usize) < ih && lo < hi;
                            let span = inside.then(|| {
                                let wi = lo * self.s[2] + dw - self.p[2];
                                (lo, hi, (ti as usize * ih + hi_ as usize) * iw + wi)
                            });
                            f(offset, span);
                            offset += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Unfolds the `cin_g` channels starting at `x` into `col [rows, cols]`.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let (cols, taps, in_len, ow, sw) = (self.cols(), self.k.iter().product::<usize>(), self.in_len(), self.out[2], self.s[2]);
        for c in 0..self.cin_g {
            let src = &x[c * in_len..(c + 1) * in_len];
            let dst = &mut col[c * taps * cols..(c + 1) * taps * cols];
            self.for_each_line(|offset, span| {
                let line = &mut dst[offset..offset + ow];
                match span {
                    None => line.fill(T::zero()),
                    Some((lo, hi, start)) => {
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if sw == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (d, s) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(sw)) {
                                *d = *s;
                            }
                        }
                    }
                }
            });
        }
    }

    /// Adjoint of [`im2col`]: scatters `col` back, accumulating into `dx`.
    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let (cols, taps, in_len, sw) = (self.cols(), self.k.iter().product::<usize>(), self.in_len(), self.s[2]);
        for c in 0..self.cin_g {
            let dst = &mut dx[c * in_len..(c + 1) * in_len];
            let src = &col[c * taps * cols..(c + 1) * taps * cols];
            self.for_each_line(|offset, span| {
                if let Some((lo, hi, start)) = span {
                    let line = &src[offset + lo..offset + hi];
                    for (d, s) in dst[start..].iter_mut().step_by(sw).zip(line) {
                        *d += *s;
                    }
                }
            });
        }
    }
}

/// Grouped cross-correlation plus optional bias.
pub fn conv3d<T: Scalar>(x: &Tensor<T>, p: &Conv3d<T>) -> Result<Tensor<T>> {
    let [n, cin, t, h, w] = x.shape().ncthw("conv3d")?;
    if cin != p.in_channels() {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            lhs: x.shape().clone(),
            rhs: p.weight.shape().clone(),
        });
    }
    if cin % p.groups != 0 {
        return Err(Error::invalid("conv3d", format!("groups {} does not divide {cin}", p.groups)));
    }
    let out = p.output_extent([t, h, w])?;
    let cout = p.out_channels();
    let groups = p.groups;
    let cout_g = cout / groups;
    let geo = Geometry {
        cin_g: cin / groups,
        inp: [t, h, w],
        out,
        k: p.kernel(),
        s: p.stride,
        p: p.padding,
        replicate_t: p.temporal_pad == TemporalPad::Replicate,
    };
    let (rows, cols, in_len) = (geo.rows(), geo.cols(), geo.in_len());

    let mut y = vec![T::zero(); n * cout * cols];
    let mut col = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
    let wdata = p.weight.data();
    for ni in 0..n {
        for g in 0..groups {
            let xs = &x.data()[(ni * cin + g * geo.cin_g) * in_len..];
            let src: &[T] = if geo.is_pointwise() {
                xs
            } else {
                geo.im2col(xs, &mut col);
                &col
            };
            gemm(
                cout_g,
                rows,
                cols,
                (&wdata[g * cout_g * rows..], rows, 1),
                (src, cols, 1),
                (&mut y[(ni * cout + g * cout_g) * cols..], cols, 1),
                false,
            );
        }
    }
    let mut inputs = vec![x.clone(), p.weight.clone()];
    if let Some(b) = &p.bias {
        let b = b.data();
        for (i, chunk) in y.chunks_mut(cols).enumerate() {
            let bv = b[i % cout];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        inputs.push(p.bias.clone().unwrap());
    }
    let shape = Shape::new(vec![n, cout, out[0], out[1], out[2]])?;
    let (xc, wc) = (x.clone(), p.weight.clone());
    Tensor::from_op("conv3d", shape, y, inputs, move |ctx| {
        let dy = ctx.grad;
        let pointwise = geo.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); rows * cols] };
        let mut dw = ctx.needs[1].then(|| vec![T::zero(); wc.numel()]);
        let mut dx = ctx.needs[0].then(|| vec![T::zero(); xc.numel()]);
        for ni in 0..n {
            for g in 0..groups {
                let dy_g = &dy[(ni * cout + g * cout_g) * cols..];
                let x_off = (ni * cin + g * geo.cin_g) * in_len;
                if let Some(dw) = dw.as_mut() {
                    let src: &[T] = if pointwise {
                        &xc.data()[x_off..]
                    } else {
                        geo.im2col(&xc.data()[x_off..], &mut col);
                        &col
                    };
                    // dW_g += dY_g * col^T
                    gemm(
                        cout_g,
                        cols,
                        rows,
                        (dy_g, cols, 1),
                        (src, 1, cols),
                        (&mut dw[g * cout_g * rows..], rows, 1),
                        true,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let wg = &wc.data()[g * cout_g * rows..];
                    if pointwise {
                        gemm(
                            rows,
                            cout_g,
                            cols,
                            (wg, 1, rows),
                            (dy_g, cols, 1),
                            (&mut dx[x_off..], cols, 1),
                            false,
                        );
                    } else {
                        // dcol = W_g^T * dY_g
                        gemm(rows, cout_g, cols, (wg, 1, rows), (dy_g, cols, 1), (&mut col, cols, 1), false);
                        geo.col2im(&col, &mut dx[x_off..]);
                    }
                }
            }
        }
        let mut grads = vec![dx, dw];
        if ctx.needs.len() == 3 {
            grads.push(ctx.needs[2].then(|| {
                let mut db = vec![T::zero(); cout];
                for (i, chunk) in dy.chunks(cols).enumerate() {
                    db[i % cout] += chunk.iter().copied().sum::<T>();
                }
                db
            }));
        }
        grads
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(weight: Vec<f64>, dims: [usize; 5], padding: [usize; 3], groups: usize) -> Conv3d<f64> {
        Conv3d::new(Tensor::param(weight, dims).unwrap(), None, [1; 3], padding, groups).unwrap()
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::<f64>::new((0..24).map(f64::from).collect(), [1, 1, 2, 3, 4]).unwrap();
        let y = conv3d(&x, &conv(vec![1.0], [1, 1, 1, 1, 1], [0; 3], 1)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn temporal_ones_kernel_same_padding() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], [1, 1, 4, 1, 1]).unwrap();
        let y = conv3d(&x, &conv(vec![1.0; 3], [1, 1, 3, 1, 1], [1, 0, 0], 1)).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn replicate_padding_repeats_edge_frames() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], [1, 1, 4, 1, 1]).unwrap();
        let p = conv(vec![1.0; 3], [1, 1, 3, 1, 1], [1, 0, 0], 1).with_temporal_pad(TemporalPad::Replicate);
        assert_eq!(conv3d(&x, &p).unwrap().data(), &[4.0, 6.0, 9.0, 11.0]);
        let c = Tensor::<f64>::full([1, 1, 5, 1, 1], 2.0).unwrap();
        assert!(conv3d(&c, &p).unwrap().data().iter().all(|&v| v == 6.0));
    }

    #[test]
    fn groups_isolate_channels() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
        let p = Conv3d::<f64>::init(4, 4, [3, 3, 3], [1; 3], [1; 3], 2, true, &mut rng).unwrap();
        let data: Vec<f64> = (0..4 * 27).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut zeroed = data.clone();
        zeroed[2 * 27..].iter_mut().for_each(|v| *v = 0.0);
        let a = conv3d(&Tensor::new(data, [1, 4, 3, 3, 3]).unwrap(), &p).unwrap();
        let b = conv3d(&Tensor::new(zeroed, [1, 4, 3, 3, 3]).unwrap(), &p).unwrap();
        assert_eq!(a.data()[..2 * 27], b.data()[..2 * 27]);
        assert_ne!(a.data()[2 * 27..], b.data()[2 * 27..]);
    }

    #[test]
    fn rejects_bad_groups_and_extent() {
        let w = Tensor::<f64>::param(vec![0.0; 3 * 2], [3, 2, 1, 1, 1]).unwrap();
        assert!(Conv3d::new(w, None, [1; 3], [0; 3], 2).is_err());
        let p = conv(vec![0.0; 5], [1, 1, 5, 1, 1], [0; 3], 1);
        let x = Tensor::<f64>::zeros([1, 1, 3, 1, 1]).unwrap();
        assert!(conv3d(&x, &p).is_err());
        let x = Tensor::<f64>::zeros([1, 2, 5, 1, 1]).unwrap();
        assert!(matches!(conv3d(&x, &p), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn strided_output_extent() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let p = Conv3d::<f64>::init(2, 4, [1, 3, 3], [1, 2, 2], [0, 1, 1], 1, false, &mut rng).unwrap();
        assert_eq!(p.output_extent([8, 16, 16]).unwrap(), [8, 8, 8]);
        assert_eq!(p.output_extent([8, 15, 15]).unwrap(), [8, 8, 8]);
    }

    fn geometry(cin_g: usize, inp: [usize; 3], k: [usize; 3], s: [usize; 3], p: [usize; 3], replicate_t: bool) -> Geometry {
        let out: Vec<usize> = (0..3).map(|a| (inp[a] + 2 * p[a] - k[a]) / s[a] + 1).collect();
        Geometry {
            cin_g,
            inp,
            out: [out[0], out[1], out[2]],
            k,
            s,
            p,
            replicate_t,
        }
    }

    const CASES: [([usize; 3], [usize; 3], [usize; 3], [usize; 3], bool); 5] = [
        ([4, 5, 7], [3, 3, 3], [1, 1, 1], [1, 1, 1], false),
        ([4, 5, 7], [3, 3, 3], [2, 2, 2], [1, 1, 1], true),
        ([3, 8, 8], [1, 7, 7], [1, 2, 2], [0, 3, 3], false),
        ([5, 6, 5], [3, 1, 3], [1, 3, 2], [1, 0, 2], true),
        ([2, 3, 3], [1, 3, 3], [1, 1, 1], [0, 2, 2], false),
    ];

    #[test]
    fn im2col_matches_direct_indexing() {
        for (inp, k, s, p, rep) in CASES {
            let g = geometry(2, inp, k, s, p, rep);
            let x: Vec<f64> = (0..2 * g.in_len()).map(|i| (i as f64 * 0.71).sin()).collect();
            let mut col = vec![f64::NAN; g.rows() * g.cols()];
            g.im2col(&x, &mut col);
            let [ot, oh, ow] = g.out;
            let mut row = 0;
            for c in 0..2 {
                for dt in 0..k[0] {
                    for dh in 0..k[1] {
                        for dw in 0..k[2] {
                            for t in 0..ot {
                                for h in 0..oh {
                                    for w in 0..ow {
                                        let mut ti = (t * s[0] + dt) as isize - p[0] as isize;
                                        if rep {
                                            ti = ti.clamp(0, inp[0] as isize - 1);
                                        }
                                        let hi = (h * s[1] + dh) as isize - p[1] as isize;
                                        let wi = (w * s[2] + dw) as isize - p[2] as isize;
                                        let inside = [ti, hi, wi].iter().zip(inp).all(|(&v, n)| v >= 0 && (v as usize) < n);
                                        let want = if inside {
                                            x[c * g.in_len() + (ti as usize * inp[1] + hi as usize) * inp[2] + wi as usize]
                                        } else {
                                            0.0
                                        };
                                        assert_eq!(col[row * g.cols() + (t * oh + h) * ow + w], want);
                                    }
                                }
                            }
                            row += 1;
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        for (inp, k, s, p, rep) in CASES {
            let g = geometry(3, inp, k, s, p, rep);
            let x: Vec<f64> = (0..3 * g.in_len()).map(|i| (i as f64 * 0.37).cos()).collect();
            let c: Vec<f64> = (0..g.rows() * g.cols()).map(|i| (i as f64 * 0.13).sin()).collect();
            let mut col = vec![0.0; c.len()];
            g.im2col(&x, &mut col);
            let mut dx = vec![0.0; x.len()];
            g.col2im(&c, &mut dx);
            let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} {rhs}");
        }
    }
}
