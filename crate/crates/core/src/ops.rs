//! Forward and backward kernels shared by the graph and the tracker.
//!
//! Every kernel accumulates each output element in a fixed order
//! (input channel, then kernel row, then kernel column) so that results are
//! bit-reproducible and comparable against naive reference loops.

use alloc::vec::Vec;

use crate::error::{shape_err, usage_err, Result};
use crate::tensor::{Real, Tensor};

/// Stride, dilation and zero padding of a 2-D convolution, each as
/// `(vertical, horizontal)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub const fn new(dilation: (usize, usize), padding: (usize, usize)) -> Self {
        Self { stride: (1, 1), dilation, padding }
    }

    pub const fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    /// Output extent along one axis, `None` when the kernel does not fit.
    fn out_len(len: usize, k: usize, stride: usize, dil: usize, pad: usize) -> Option<usize> {
        let span = dil * (k - 1) + 1;
        let padded = len + 2 * pad;
        (padded >= span).then(|| (padded - span) / stride + 1)
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride.0 == 0 || self.stride.1 == 0 || self.dilation.0 == 0 || self.dilation.1 == 0 {
            return Err(usage_err!("stride and dilation must be >= 1, got {:?}", self));
        }
        let oh = Self::out_len(h, kh, self.stride.0, self.dilation.0, self.padding.0);
        let ow = Self::out_len(w, kw, self.stride.1, self.dilation.1, self.padding.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(shape_err!("kernel {}x{} with {:?} does not fit input {}x{}", kh, kw, self, h, w)),
        }
    }
}

/// Range of output indices `o` for which `o*stride + tap - pad` lands in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let tap = tap as isize;
    let pad = pad as isize;
    let stride = stride as isize;
    // o*stride >= pad - tap
    let lo_num = pad - tap;
    let lo = if lo_num <= 0 { 0 } else { (lo_num + stride - 1) / stride };
    // o*stride <= len - 1 + pad - tap
    let hi_num = len as isize - 1 + pad - tap;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / stride + 1).min(out_len as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn conv_dims(input: &Tensor, weight: &Tensor) -> Result<((usize, usize, usize), [usize; 4])> {
    let (c, h, w) = input.dims3()?;
    let wd: [usize; 4] = match *weight.shape() {
        [a, b, kh, kw] => [a, b, kh, kw],
        _ => return Err(shape_err!("conv weight must be rank 4, got {:?}", weight.shape())),
    };
    if wd[1] != c {
        return Err(shape_err!("conv weight expects {} input channels, input has {}", wd[1], c));
    }
    if wd[2] % 2 == 0 || wd[3] % 2 == 0 {
        return Err(usage_err!("conv kernel must be odd-sized, got {}x{}", wd[2], wd[3]));
    }
    Ok(((c, h, w), wd))
}

/// Unfolds the receptive fields of `input` into rows ordered
/// (channel, kernel row, kernel column), one column per output position.
/// Taps that land in the zero padding stay 0.
fn im2col(input: &Tensor, kh: usize, kw: usize, geom: ConvGeometry, oh: usize, ow: usize) -> Vec<Real> {
    let (cin, h, w) = input.dims3().expect("checked by caller");
    let (sy, sx) = geom.stride;
    let (dy, dx) = geom.dilation;
    let (py, px) = geom.padding;
    let x = input.data();
    let np = oh * ow;
    let mut col = alloc::vec![0.0; cin * kh * kw * np];
    for ci in 0..cin {
        let iplane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(oh, h, sy, ky * dy, py);
            for kx in 0..kw {
                let (ox0, ox1) = valid_range(ow, w, sx, kx * dx, px);
                if ox0 >= ox1 {
                    continue;
                }
                let r = (ci * kh + ky) * kw + kx;
                let crow = &mut col[r * np..(r + 1) * np];
                for oy in oy0..oy1 {
                    let iy = oy * sy + ky * dy - py;
                    let irow = &iplane[iy * w..(iy + 1) * w];
                    let dst = &mut crow[oy * ow + ox0..oy * ow + ox1];
                    let start = ox0 * sx + kx * dx - px;
                    if sx == 1 {
                        dst.copy_from_slice(&irow[start..start + (ox1 - ox0)]);
                    } else {
                        for (d, s) in dst.iter_mut().zip(irow[start..].iter().step_by(sx)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(col: &[Real], shape: (usize, usize, usize), kh: usize, kw: usize, geom: ConvGeometry, oh: usize, ow: usize) -> Tensor {
    let (cin, h, w) = shape;
    let (sy, sx) = geom.stride;
    let (dy, dx) = geom.dilation;
    let (py, px) = geom.padding;
    let np = oh * ow;
    let mut gx = Tensor::zeros(&[cin, h, w]);
    let g = gx.data_mut();
    for ci in 0..cin {
        let gplane = &mut g[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(oh, h, sy, ky * dy, py);
            for kx in 0..kw {
                let (ox0, ox1) = valid_range(ow, w, sx, kx * dx, px);
                if ox0 >= ox1 {
                    continue;
                }
                let r = (ci * kh + ky) * kw + kx;
                let crow = &col[r * np..(r + 1) * np];
                for oy in oy0..oy1 {
                    let iy = oy * sy + ky * dy - py;
                    let grow = &mut gplane[iy * w..(iy + 1) * w];
                    let src = &crow[oy * ow + ox0..oy * ow + ox1];
                    let start = ox0 * sx + kx * dx - px;
                    for (d, s) in grow[start..].iter_mut().step_by(sx).zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
    gx
}

/// Dot product with independent partial sums (order differs from a plain fold).
fn dot(a: &[Real], b: &[Real]) -> Real {
    let mut acc = [0.0 as Real; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    acc.iter().sum::<Real>() + tail
}

/// Dilated, strided, zero-padded 2-D convolution (cross-correlation form).
///
/// `input` is `[C_in, H, W]`, `weight` is `[C_out, C_in, kh, kw]`.
/// Each output starts at 0 and adds `w * x` over (channel, row, column);
/// padded taps contribute an exact zero.
pub fn conv2d(input: &Tensor, weight: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let ((_, h, w), [cout, cin, kh, kw]) = conv_dims(input, weight)?;
    let (oh, ow) = geom.output_size(h, w, kh, kw)?;
    let col = im2col(input, kh, kw, geom, oh, ow);
    let np = oh * ow;
    let kk = cin * kh * kw;
    let wt = weight.data();
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for (co, orow) in out.data_mut().chunks_exact_mut(np).enumerate() {
        let wrow = &wt[co * kk..(co + 1) * kk];
        for (r, &wv) in wrow.iter().enumerate() {
            for (o, &c) in orow.iter_mut().zip(&col[r * np..(r + 1) * np]) {
                *o += wv * c;
            }
        }
    }
    out.check_finite("conv2d")
}

/// Gradients of [`conv2d`] with respect to its weight and, when
/// `need_input` is set, its input.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    geom: ConvGeometry,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let ((_, h, w), [cout, cin, kh, kw]) = conv_dims(input, weight)?;
    let (oh, ow) = geom.output_size(h, w, kh, kw)?;
    if grad_out.shape() != [cout, oh, ow] {
        return Err(shape_err!("conv2d grad has shape {:?}, expected {:?}", grad_out.shape(), [cout, oh, ow]));
    }
    let np = oh * ow;
    let kk = cin * kh * kw;
    let col = im2col(input, kh, kw, geom, oh, ow);
    let g = grad_out.data();
    let wt = weight.data();
    let mut gw = Tensor::zeros(weight.shape());
    for (co, gwrow) in gw.data_mut().chunks_exact_mut(kk).enumerate() {
        let grow = &g[co * np..(co + 1) * np];
        for (r, v) in gwrow.iter_mut().enumerate() {
            *v = dot(grow, &col[r * np..(r + 1) * np]);
        }
    }
    let gx = need_input.then(|| {
        let mut gcol = alloc::vec![0.0; kk * np];
        for co in 0..cout {
            let grow = &g[co * np..(co + 1) * np];
            for (r, &wv) in wt[co * kk..(co + 1) * kk].iter().enumerate() {
                for (d, &s) in gcol[r * np..(r + 1) * np].iter_mut().zip(grow) {
                    *d += wv * s;
                }
            }
        }
        col2im(&gcol, (cin, h, w), kh, kw, geom, oh, ow)
    });
    Ok((gx, gw))
}

/// Per-channel valid cross-correlation of `kernel` `[C, Hk, Wk]` over
/// `search` `[C, Hs, Ws]`. Channels are never mixed.
pub fn depthwise_xcorr(search: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (c, hs, ws) = search.dims3()?;
    let (ck, hk, wk) = kernel.dims3()?;
    if c != ck {
        return Err(shape_err!("xcorr channel mismatch: search {} vs kernel {}", c, ck));
    }
    if hk > hs || wk > ws {
        return Err(shape_err!("xcorr kernel {}x{} larger than search {}x{}", hk, wk, hs, ws));
    }
    let (oh, ow) = (hs - hk + 1, ws - wk + 1);
    let s = search.data();
    let k = kernel.data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let o = out.data_mut();
    for ch in 0..c {
        let splane = &s[ch * hs * ws..(ch + 1) * hs * ws];
        let oplane = &mut o[ch * oh * ow..(ch + 1) * oh * ow];
        for ky in 0..hk {
            for kx in 0..wk {
                let kv = k[(ch * hk + ky) * wk + kx];
                for y in 0..oh {
                    let srow = &splane[(y + ky) * ws + kx..(y + ky) * ws + kx + ow];
                    for (ov, &sv) in oplane[y * ow..(y + 1) * ow].iter_mut().zip(srow) {
                        *ov += kv * sv;
                    }
                }
            }
        }
    }
    out.check_finite("depthwise_xcorr")
}

/// Gradients of [`depthwise_xcorr`] as `(d_search, d_kernel)`.
pub fn depthwise_xcorr_backward(search: &Tensor, kernel: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, hs, ws) = search.dims3()?;
    let (_, hk, wk) = kernel.dims3()?;
    let (oh, ow) = (hs - hk + 1, ws - wk + 1);
    if grad_out.shape() != [c, oh, ow] {
        return Err(shape_err!("xcorr grad has shape {:?}, expected {:?}", grad_out.shape(), [c, oh, ow]));
    }
    let s = search.data();
    let k = kernel.data();
    let g = grad_out.data();
    let mut gs = Tensor::zeros(search.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    let (gsd, gkd) = (gs.data_mut(), gk.data_mut());
    for ch in 0..c {
        for ky in 0..hk {
            for kx in 0..wk {
                let kidx = (ch * hk + ky) * wk + kx;
                let kv = k[kidx];
                let mut acc: Real = 0.0;
                for y in 0..oh {
                    let sbase = ch * hs * ws + (y + ky) * ws + kx;
                    let grow = &g[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
                    for (x, &gv) in grow.iter().enumerate() {
                        acc += gv * s[sbase + x];
                        gsd[sbase + x] += kv * gv;
                    }
                }
                gkd[kidx] += acc;
            }
        }
    }
    Ok((gs, gk))
}

/// Up to four `(flat index, weight)` pairs that realise bilinear
/// interpolation at a real-valued position of an `h x w` plane.
///
/// Neighbours outside the plane are dropped, which is zero padding; zero
/// weights are dropped so that integer positions read exactly one cell.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTaps {
    idx: [usize; 4],
    weight: [Real; 4],
    n: usize,
}

impl BilinearTaps {
    pub fn new(y: Real, x: Real, h: usize, w: usize) -> Self {
        let mut taps = Self { idx: [0; 4], weight: [0.0; 4], n: 0 };
        if !y.is_finite() || !x.is_finite() {
            return taps;
        }
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let corners = [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x0 + 1.0, (1.0 - fy) * fx),
            (y0 + 1.0, x0, fy * (1.0 - fx)),
            (y0 + 1.0, x0 + 1.0, fy * fx),
        ];
        for (cy, cx, wt) in corners {
            if wt == 0.0 || cy < 0.0 || cx < 0.0 || cy > (h - 1) as Real || cx > (w - 1) as Real {
                continue;
            }
            taps.idx[taps.n] = cy as usize * w + cx as usize;
            taps.weight[taps.n] = wt;
            taps.n += 1;
        }
        taps
    }

    #[inline]
    pub fn iter(&self) -> impl Iterator<Item = (usize, Real)> + '_ {
        self.idx[..self.n].iter().copied().zip(self.weight[..self.n].iter().copied())
    }

    /// Interpolated value of `plane` at this position.
    #[inline]
    pub fn sample(&self, plane: &[Real]) -> Real {
        let mut v: Real = 0.0;
        for (i, wt) in self.iter() {
            v += wt * plane[i];
        }
        v
    }
}

/// Partial derivatives `(d/dy, d/dx)` of the zero-padded bilinear
/// interpolant of `plane` at `(y, x)`.
pub fn bilinear_grad(plane: &[Real], h: usize, w: usize, y: Real, x: Real) -> (Real, Real) {
    if !y.is_finite() || !x.is_finite() {
        return (0.0, 0.0);
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let at = |cy: Real, cx: Real| -> Real {
        if cy < 0.0 || cx < 0.0 || cy > (h - 1) as Real || cx > (w - 1) as Real {
            0.0
        } else {
            plane[cy as usize * w + cx as usize]
        }
    };
    let (v00, v01, v10, v11) = (at(y0, x0), at(y0, x0 + 1.0), at(y0 + 1.0, x0), at(y0 + 1.0, x0 + 1.0));
    let dy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
    let dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
    (dy, dx)
}

/// Samples every channel of `feature` `[C, H, W]` at each `(y, x)` position.
/// Returns `[C, positions.len()]`.
pub fn bilinear_sample(feature: &Tensor, positions: &[(Real, Real)]) -> Result<Tensor> {
    let (c, h, w) = feature.dims3()?;
    let taps: Vec<BilinearTaps> = positions.iter().map(|&(y, x)| BilinearTaps::new(y, x, h, w)).collect();
    let mut out = Tensor::zeros(&[c, positions.len()]);
    for ch in 0..c {
        let plane = feature.channel(ch);
        for (p, t) in taps.iter().enumerate() {
            out.data_mut()[ch * positions.len() + p] = t.sample(plane);
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: Real) -> Real {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// Direct evaluation of the dilated dot product.
    fn naive_conv(x: &Tensor, wt: &Tensor, g: ConvGeometry) -> Tensor {
        let (cin, h, w) = x.dims3().unwrap();
        let [cout, _, kh, kw] = [wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]];
        let (oh, ow) = g.output_size(h, w, kh, kw).unwrap();
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc: Real = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride.0 + ky * g.dilation.0) as isize - g.padding.0 as isize;
                                let ix = (ox * g.stride.1 + kx * g.dilation.1) as isize - g.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt.data()[((co * cin + ci) * kh + ky) * kw + kx]
                                    * x.at3(ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.data_mut()[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| (i as Real) * 0.37 - (i * i % 7) as Real)
    }

    #[test]
    fn ones_center_is_nine() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, ConvGeometry::new((1, 1), (1, 1))).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.at3(0, 1, 1), 9.0);
    }

    #[test]
    fn irregular_dilation_keeps_width_and_matches_oracle() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let g = ConvGeometry::new((1, 2), (1, 2));
        let y = conv2d(&x, &w, g).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        // Centre taps land on columns -1, 1, 3 of which only column 1 exists.
        assert_eq!(y.at3(0, 1, 1), 3.0);
        assert_eq!(y, naive_conv(&x, &w, g));
    }

    #[test]
    fn axis_distinct_dilation() {
        let x = Tensor::from_fn(&[1, 5, 5], |i| (i / 5) as Real * 10.0 + (i % 5) as Real * (i % 5) as Real);
        let w = Tensor::from_fn(&[1, 1, 3, 3], |i| i as Real + 1.0);
        let a = conv2d(&x, &w, ConvGeometry::new((2, 1), (2, 1))).unwrap();
        let b = conv2d(&x, &w, ConvGeometry::new((1, 2), (1, 2))).unwrap();
        assert_eq!(a, naive_conv(&x, &w, ConvGeometry::new((2, 1), (2, 1))));
        assert_eq!(b, naive_conv(&x, &w, ConvGeometry::new((1, 2), (1, 2))));
        assert_ne!(a, b);
    }

    #[test]
    fn strided_matches_oracle() {
        let x = ramp(&[2, 9, 8]);
        let w = ramp(&[3, 2, 3, 3]);
        for g in [
            ConvGeometry::new((1, 1), (1, 1)).with_stride((2, 2)),
            ConvGeometry::new((2, 2), (2, 2)),
            ConvGeometry::new((1, 2), (0, 1)).with_stride((2, 1)),
        ] {
            assert_eq!(conv2d(&x, &w, g).unwrap(), naive_conv(&x, &w, g));
        }
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &w, ConvGeometry::new((1, 1), (1, 1))), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn xcorr_planted_patch_peaks_at_its_location() {
        let mut s = Tensor::zeros(&[2, 10, 12]);
        let patch = Tensor::from_fn(&[2, 3, 4], |i| 1.0 + (i % 5) as Real);
        let (py, px) = (4, 6);
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    s.data_mut()[(c * 10 + py + y) * 12 + px + x] = patch.at3(c, y, x);
                }
            }
        }
        let out = depthwise_xcorr(&s, &patch).unwrap();
        let (_, oh, ow) = out.dims3().unwrap();
        for c in 0..2 {
            let plane = out.channel(c);
            let best = (0..oh * ow).max_by(|&a, &b| plane[a].partial_cmp(&plane[b]).unwrap()).unwrap();
            assert_eq!((best / ow, best % ow), (py, px));
        }
    }

    #[test]
    fn xcorr_zero_and_scaling() {
        let s = ramp(&[1, 5, 6]);
        let zero = depthwise_xcorr(&s, &Tensor::zeros(&[1, 2, 2])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let two = depthwise_xcorr(&s, &Tensor::full(&[1, 1, 1], 2.0)).unwrap();
        assert_eq!(two, s.map(|v| 2.0 * v));
        assert!(depthwise_xcorr(&Tensor::zeros(&[1, 2, 2]), &Tensor::zeros(&[1, 3, 1])).is_err());
    }

    #[test]
    fn bilinear_cases() {
        let f = Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = bilinear_sample(&f, &[(1.0, 0.0), (0.5, 0.5), (-5.0, -5.0)]).unwrap();
        assert_eq!(out.data(), &[2.0, 1.5, 0.0]);
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(relu(-3.0), 0.0);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
