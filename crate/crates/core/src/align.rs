//! Box-driven feature alignment.
//!
//! For an output cell `(d_x, d_y)` with predicted box `(m_x, m_y, m_w, m_h)`
//! (all in feature-grid units) the `k x k` kernel taps are moved from the
//! regular grid `(d_x, d_y) + G` onto a uniform lattice spanning the box,
//! `(m_x, m_y) + B`. The per-tap displacement is the offset field consumed
//! by [`aligned_conv`], which samples the feature bilinearly at the new
//! positions.

use alloc::vec::Vec;

use crate::error::{numeric_err, shape_err, usage_err, Result};
use crate::ops::BilinearTaps;
use crate::tensor::{Real, Tensor};

/// `[2*k*k, H, W]` displacements in grid units. Channel `2*t` holds the
/// vertical and `2*t + 1` the horizontal offset of tap `t = p*k + q`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    pub k: usize,
    pub offsets: Tensor,
}

impl OffsetField {
    pub fn zeros(k: usize, h: usize, w: usize) -> Self {
        Self { k, offsets: Tensor::zeros(&[2 * k * k, h, w]) }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.offsets.shape()[1], self.offsets.shape()[2])
    }
}

/// Relative tap coordinate of index `t` (0..k) over a span of `extent`.
#[inline]
fn lattice(t: usize, k: usize, extent: Real) -> Real {
    if k == 1 {
        0.0
    } else {
        -extent / 2.0 + t as Real * extent / (k - 1) as Real
    }
}

/// Offsets that move each cell's regular taps onto its predicted box.
///
/// `boxes` is `[4, H, W]` in centre form `(m_x, m_y, m_w, m_h)`, grid units.
pub fn compute_offsets(boxes: &Tensor, k: usize) -> Result<OffsetField> {
    if k % 2 == 0 {
        return Err(usage_err!("kernel size must be odd, got {}", k));
    }
    let (c, h, w) = boxes.dims3()?;
    if c != 4 {
        return Err(shape_err!("expected [4, H, W] boxes, got {:?}", boxes.shape()));
    }
    if !boxes.is_finite() {
        return Err(numeric_err!("non-finite predicted box"));
    }
    let plane = h * w;
    let b = boxes.data();
    let half = (k / 2) as Real;
    let mut field = OffsetField::zeros(k, h, w);
    let o = field.offsets.data_mut();
    for i in 0..h {
        for j in 0..w {
            let v = i * w + j;
            let (mx, my, mw, mh) = (b[v], b[plane + v], b[2 * plane + v].max(0.0), b[3 * plane + v].max(0.0));
            for p in 0..k {
                let ty = my + lattice(p, k, mh);
                let ry = i as Real + p as Real - half;
                for q in 0..k {
                    let tx = mx + lattice(q, k, mw);
                    let rx = j as Real + q as Real - half;
                    let t = p * k + q;
                    o[2 * t * plane + v] = ty - ry;
                    o[(2 * t + 1) * plane + v] = tx - rx;
                }
            }
        }
    }
    Ok(field)
}

/// Converts corner-form boxes in image pixels into centre-form grid units.
pub fn boxes_to_grid_units(corner_boxes: &Tensor, grid: &crate::geometry::GridSpec) -> Result<Tensor> {
    let (c, h, w) = corner_boxes.dims3()?;
    if c != 4 {
        return Err(shape_err!("expected [4, H, W] boxes, got {:?}", corner_boxes.shape()));
    }
    let plane = h * w;
    let b = corner_boxes.data();
    let mut out = Tensor::zeros(&[4, h, w]);
    let o = out.data_mut();
    for v in 0..plane {
        let (x0, y0, x1, y1) = (b[v], b[plane + v], b[2 * plane + v], b[3 * plane + v]);
        let (gx, gy) = grid.image_to_grid((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        o[v] = gx;
        o[plane + v] = gy;
        o[2 * plane + v] = (x1 - x0) / grid.stride;
        o[3 * plane + v] = (y1 - y0) / grid.stride;
    }
    Ok(out)
}

fn aligned_dims(feature: &Tensor, weight: &Tensor, field: &OffsetField) -> Result<(usize, usize, usize, usize, usize)> {
    let (c, h, w) = feature.dims3()?;
    let k = field.k;
    let cout = match *weight.shape() {
        [co, ci, kh, kw] if ci == c && kh == k && kw == k => co,
        _ => return Err(shape_err!("aligned conv weight {:?} incompatible with {} channels, k={}", weight.shape(), c, k)),
    };
    if field.offsets.shape() != [2 * k * k, h, w] {
        return Err(shape_err!("offset field {:?} does not match feature {}x{} with k={}", field.offsets.shape(), h, w, k));
    }
    Ok((cout, c, h, w, k))
}

/// Bilinear taps for every `(cell, kernel tap)` pair, cell-major.
fn gather_taps(field: &OffsetField, h: usize, w: usize) -> Vec<BilinearTaps> {
    let k = field.k;
    let half = (k / 2) as Real;
    let plane = h * w;
    let o = field.offsets.data();
    let mut taps = Vec::with_capacity(plane * k * k);
    for i in 0..h {
        for j in 0..w {
            let v = i * w + j;
            for t in 0..k * k {
                let (p, q) = (t / k, t % k);
                let y = i as Real + (p as Real - half) + o[2 * t * plane + v];
                let x = j as Real + (q as Real - half) + o[(2 * t + 1) * plane + v];
                taps.push(BilinearTaps::new(y, x, h, w));
            }
        }
    }
    taps
}

/// `f[u] = sum_g w[g] * x[u + g + dt]` with bilinear sampling and zero
/// padding. With an all-zero field this is exactly a stride-1 `k x k`
/// convolution padded by `k/2`.
pub fn aligned_conv(feature: &Tensor, weight: &Tensor, field: &OffsetField) -> Result<Tensor> {
    let (cout, cin, h, w, k) = aligned_dims(feature, weight, field)?;
    let kk = k * k;
    let taps = gather_taps(field, h, w);
    let wt = weight.data();
    let mut out = Tensor::zeros(&[cout, h, w]);
    let o = out.data_mut();
    for co in 0..cout {
        for v in 0..h * w {
            let cell = &taps[v * kk..(v + 1) * kk];
            let mut acc: Real = 0.0;
            for ci in 0..cin {
                let plane = feature.channel(ci);
                let wrow = &wt[(co * cin + ci) * kk..(co * cin + ci + 1) * kk];
                for (wv, tap) in wrow.iter().zip(cell) {
                    acc += wv * tap.sample(plane);
                }
            }
            o[co * h * w + v] = acc;
        }
    }
    out.check_finite("aligned_conv")
}

/// Gradients of [`aligned_conv`] as `(d_feature, d_weight)`; offsets are
/// treated as constants.
pub fn aligned_conv_backward(
    feature: &Tensor,
    weight: &Tensor,
    field: &OffsetField,
    grad_out: &Tensor,
    need_feature: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let (cout, cin, h, w, k) = aligned_dims(feature, weight, field)?;
    if grad_out.shape() != [cout, h, w] {
        return Err(shape_err!("aligned conv grad {:?}, expected {:?}", grad_out.shape(), [cout, h, w]));
    }
    let kk = k * k;
    let plane = h * w;
    let taps = gather_taps(field, h, w);
    let wt = weight.data();
    let g = grad_out.data();
    let mut gw = Tensor::zeros(weight.shape());
    let mut gx = need_feature.then(|| Tensor::zeros(feature.shape()));
    for co in 0..cout {
        for v in 0..plane {
            let gv = g[co * plane + v];
            if gv == 0.0 {
                continue;
            }
            let cell = &taps[v * kk..(v + 1) * kk];
            for ci in 0..cin {
                let fplane = feature.channel(ci);
                let base = (co * cin + ci) * kk;
                for (t, tap) in cell.iter().enumerate() {
                    gw.data_mut()[base + t] += gv * tap.sample(fplane);
                    if let Some(gx) = gx.as_mut() {
                        let scale = wt[base + t] * gv;
                        let gxd = &mut gx.data_mut()[ci * plane..(ci + 1) * plane];
                        for (idx, bw) in tap.iter() {
                            gxd[idx] += scale * bw;
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw))
}

/// Gradient of the [`aligned_conv`] loss with respect to the offset field,
/// laid out like [`OffsetField::offsets`].
pub fn aligned_conv_offset_grad(feature: &Tensor, weight: &Tensor, field: &OffsetField, grad_out: &Tensor) -> Result<Tensor> {
    let (cout, cin, h, w, k) = aligned_dims(feature, weight, field)?;
    if grad_out.shape() != [cout, h, w] {
        return Err(shape_err!("aligned conv grad {:?}, expected {:?}", grad_out.shape(), [cout, h, w]));
    }
    let kk = k * k;
    let plane = h * w;
    let half = (k / 2) as Real;
    let o = field.offsets.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut out = Tensor::zeros(field.offsets.shape());
    for i in 0..h {
        for j in 0..w {
            let v = i * w + j;
            for t in 0..kk {
                let (p, q) = (t / k, t % k);
                let y = i as Real + (p as Real - half) + o[2 * t * plane + v];
                let x = j as Real + (q as Real - half) + o[(2 * t + 1) * plane + v];
                let (mut gy, mut gx) = (0.0, 0.0);
                for ci in 0..cin {
                    let (dy, dx) = crate::ops::bilinear_grad(feature.channel(ci), h, w, y, x);
                    let mut coef: Real = 0.0;
                    for co in 0..cout {
                        coef += g[co * plane + v] * wt[(co * cin + ci) * kk + t];
                    }
                    gy += coef * dy;
                    gx += coef * dx;
                }
                out.data_mut()[2 * t * plane + v] = gy;
                out.data_mut()[(2 * t + 1) * plane + v] = gx;
            }
        }
    }
    Ok(out)
}

/// Chains an offset-field gradient back onto the `(l, t, r, b)` pixel
/// distances the field was derived from (grid of the given `stride`).
///
/// A tap at lattice fraction `f` along an axis sits at
/// `cell - near/stride + f * (near + far)/stride` in grid units.
pub fn offset_grad_to_distances(offset_grad: &Tensor, k: usize, stride: Real) -> Result<Tensor> {
    let (c, h, w) = offset_grad.dims3()?;
    if c != 2 * k * k {
        return Err(shape_err!("offset gradient has {} channels, expected {}", c, 2 * k * k));
    }
    let plane = h * w;
    let frac = |t: usize| if k == 1 { 0.5 } else { t as Real / (k - 1) as Real };
    let og = offset_grad.data();
    let mut out = Tensor::zeros(&[4, h, w]);
    let d = out.data_mut();
    for t in 0..k * k {
        let (fy, fx) = (frac(t / k), frac(t % k));
        for v in 0..plane {
            let gy = og[2 * t * plane + v];
            let gx = og[(2 * t + 1) * plane + v];
            d[v] += gx * (fx - 1.0) / stride;
            d[plane + v] += gy * (fy - 1.0) / stride;
            d[2 * plane + v] += gx * fx / stride;
            d[3 * plane + v] += gy * fy / stride;
        }
    }
    Ok(out)
}
