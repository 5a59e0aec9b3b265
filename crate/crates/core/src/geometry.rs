//! Boxes and the feature-grid to image-pixel mapping.


use crate::error::{usage_err, Result};
use crate::tensor::Real;

/// Axis-aligned box in image pixels, stored in corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x0: Real,
    pub y0: Real,
    pub x1: Real,
    pub y1: Real,
}

impl BBox {
    pub const fn new(x0: Real, y0: Real, x1: Real, y1: Real) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn from_center(cx: Real, cy: Real, w: Real, h: Real) -> Self {
        Self { x0: cx - w / 2.0, y0: cy - h / 2.0, x1: cx + w / 2.0, y1: cy + h / 2.0 }
    }

    pub fn cx(&self) -> Real {
        (self.x0 + self.x1) / 2.0
    }

    pub fn cy(&self) -> Real {
        (self.y0 + self.y1) / 2.0
    }

    pub fn w(&self) -> Real {
        self.x1 - self.x0
    }

    pub fn h(&self) -> Real {
        self.y1 - self.y0
    }

    pub fn area(&self) -> Real {
        self.w().max(0.0) * self.h().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite()) && self.x1 >= self.x0 && self.y1 >= self.y0
    }

    pub fn has_positive_area(&self) -> bool {
        self.is_valid() && self.x1 > self.x0 && self.y1 > self.y0
    }

    /// Boundary-inclusive containment.
    pub fn contains(&self, x: Real, y: Real) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn translate(&self, dx: Real, dy: Real) -> Self {
        Self::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    pub fn intersection(&self, other: &Self) -> Real {
        let iw = self.x1.min(other.x1) - self.x0.max(other.x0);
        let ih = self.y1.min(other.y1) - self.y0.max(other.y0);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clip(&self, width: Real, height: Real) -> Self {
        let cl = |v: Real, hi: Real| v.max(0.0).min(hi);
        Self::new(cl(self.x0, width), cl(self.y0, height), cl(self.x1, width), cl(self.y1, height))
    }
}

/// Intersection over union. Disjoint boxes and a zero-area union give 0.
pub fn iou(a: &BBox, b: &BBox) -> Real {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Affine map from feature cells to image pixels: cell `(i, j)` sits at
/// `(offset + j*stride, offset + i*stride)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub stride: Real,
    pub offset: Real,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, stride: Real, offset: Real) -> Self {
        Self { height, width, stride, offset }
    }

    /// Square grid centred in a square crop of `image_size` pixels.
    pub fn centered(size: usize, stride: Real, image_size: Real) -> Self {
        let offset = (image_size - stride * (size as Real - 1.0)) / 2.0;
        Self::new(size, size, stride, offset)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Image position `(x, y)` of a cell; errors outside the grid.
    pub fn feat_to_image(&self, i: usize, j: usize) -> Result<(Real, Real)> {
        if i >= self.height || j >= self.width {
            return Err(usage_err!("cell ({}, {}) outside {}x{} grid", i, j, self.height, self.width));
        }
        Ok(self.position(i, j))
    }

    /// Unchecked version of [`GridSpec::feat_to_image`].
    #[inline]
    pub fn position(&self, i: usize, j: usize) -> (Real, Real) {
        (self.offset + j as Real * self.stride, self.offset + i as Real * self.stride)
    }

    /// Inverse mapping into (fractional) grid units `(gx, gy)`.
    #[inline]
    pub fn image_to_grid(&self, x: Real, y: Real) -> (Real, Real) {
        ((x - self.offset) / self.stride, (y - self.offset) / self.stride)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        let p = BBox::new(3.0, 3.0, 3.0, 3.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn center_round_trip() {
        let b = BBox::new(10.0, 20.0, 50.0, 60.0);
        let c = BBox::from_center(b.cx(), b.cy(), b.w(), b.h());
        assert_eq!(b, c);
    }

    #[test]
    fn grid_mapping() {
        let g = GridSpec::new(9, 9, 8.0, 31.0);
        assert_eq!(g.feat_to_image(0, 0).unwrap(), (31.0, 31.0));
        assert_eq!(g.feat_to_image(2, 3).unwrap(), (55.0, 47.0));
        assert!(g.feat_to_image(9, 0).is_err());
        let id = GridSpec::new(4, 5, 1.0, 0.0);
        assert_eq!(id.feat_to_image(3, 2).unwrap(), (2.0, 3.0));
        assert_eq!(GridSpec::centered(9, 8.0, 128.0).offset, 32.0);
    }
}
