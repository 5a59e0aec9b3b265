//! Square crops of `[3, H, W]` frames with bilinear resampling.

use alloc::vec::Vec;

use crate::error::{usage_err, Result};
use crate::tensor::{Real, Tensor};

/// Per-channel mean of a `[C, H, W]` image.
pub fn channel_means(frame: &Tensor) -> Result<Vec<Real>> {
    let (c, h, w) = frame.dims3()?;
    Ok((0..c).map(|ch| frame.channel(ch).iter().sum::<Real>() / (h * w) as Real).collect())
}

/// Crops the square of side `size` (frame pixels) centred on `(cx, cy)`
/// and resamples it to `out x out`. Area outside the frame takes the
/// frame's channel mean.
pub fn crop_resize(frame: &Tensor, cx: Real, cy: Real, size: Real, out: usize) -> Result<Tensor> {
    let means = channel_means(frame)?;
    crop_resize_with_fill(frame, cx, cy, size, out, &means)
}

pub fn crop_resize_with_fill(frame: &Tensor, cx: Real, cy: Real, size: Real, out: usize, fill: &[Real]) -> Result<Tensor> {
    let (c, h, w) = frame.dims3()?;
    if !(size > 0.0) || !cx.is_finite() || !cy.is_finite() || out == 0 {
        return Err(usage_err!("invalid crop: centre ({}, {}), size {}, out {}", cx, cy, size, out));
    }
    if fill.len() != c {
        return Err(usage_err!("fill has {} values for {} channels", fill.len(), c));
    }
    let step = size / out as Real;
    let x_start = cx - size / 2.0;
    let y_start = cy - size / 2.0;
    // Pixel centres: output pixel o covers [start + o*step, start + (o+1)*step).
    let src = |o: usize, start: Real| start + (o as Real + 0.5) * step - 0.5;
    let xs: Vec<(isize, Real)> = (0..out)
        .map(|o| {
            let s = src(o, x_start);
            let f = s.floor();
            (f as isize, s - f)
        })
        .collect();
    let mut result = Tensor::zeros(&[c, out, out]);
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
    for ch in 0..c {
        let plane = frame.channel(ch);
        let m = fill[ch];
        let at = |y: isize, x: isize| if inside(y, x) { plane[y as usize * w + x as usize] } else { m };
        for oy in 0..out {
            let sy = src(oy, y_start);
            let y0 = sy.floor();
            let fy = sy - y0;
            let y0 = y0 as isize;
            let row = &mut result.data_mut()[(ch * out + oy) * out..(ch * out + oy + 1) * out];
            for (ox, &(x0, fx)) in xs.iter().enumerate() {
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                row[ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_crop() {
        let f = Tensor::from_fn(&[3, 8, 8], |i| i as Real);
        let c = crop_resize(&f, 4.0, 4.0, 8.0, 8).unwrap();
        assert_eq!(c, f);
    }

    #[test]
    fn outside_is_mean_padded() {
        let f = Tensor::from_fn(&[3, 4, 4], |i| (i / 16) as Real + 0.25 * ((i % 2) as Real));
        let c = crop_resize(&f, -100.0, -100.0, 4.0, 4).unwrap();
        let means = channel_means(&f).unwrap();
        for ch in 0..3 {
            assert!(c.channel(ch).iter().all(|&v| (v - means[ch]).abs() < 1e-12));
        }
    }
}
