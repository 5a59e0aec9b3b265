//! Per-cell training targets and box decoding.
//!
//! Regression samples are all cells whose image position falls inside the
//! groundtruth box (boundary inclusive); their targets are the pixel
//! distances `(l, t, r, b)` to the four sides. Regular classification
//! positives are cells within `R` pixels of the box centre; object-aware
//! labels are the IoU of each cell's predicted box with the groundtruth.

use crate::error::{shape_err, usage_err, Error, Result};
use crate::geometry::{iou, BBox, GridSpec};
use crate::tensor::{Real, Tensor};
use alloc::format;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelBundle {
    /// `[4, H, W]` distances `(l, t, r, b)` in pixels, zero outside the mask.
    pub reg_targets: Tensor,
    /// `[H, W]`, 1 where the cell lies inside the groundtruth box.
    pub reg_mask: Tensor,
    /// `[H, W]` binary centre labels, restricted to `reg_mask`.
    pub cls_regular: Tensor,
    /// `[H, W]` negatives of the regular classifier (`1 - cls_regular`).
    pub cls_neg_mask: Tensor,
}

impl LabelBundle {
    /// Regression targets plus regular classification labels for one box.
    pub fn build(gt: &BBox, grid: &GridSpec, radius: Real) -> Result<Self> {
        let (reg_targets, reg_mask) = regression_targets(gt, grid)?;
        let centre = classification_labels_regular(gt, grid, radius)?;
        let cls_regular = centre.zip_map(&reg_mask, |c, m| c * m)?;
        let cls_neg_mask = cls_regular.map(|v| 1.0 - v);
        Ok(Self { reg_targets, reg_mask, cls_regular, cls_neg_mask })
    }
}

/// Distances from every in-box cell to the sides of `gt`, and the in-box mask.
pub fn regression_targets(gt: &BBox, grid: &GridSpec) -> Result<(Tensor, Tensor)> {
    if !gt.has_positive_area() {
        return Err(Error::Degenerate(format!("groundtruth box {:?} has no area", gt)));
    }
    let (h, w) = (grid.height, grid.width);
    let plane = h * w;
    let mut targets = Tensor::zeros(&[4, h, w]);
    let mut mask = Tensor::zeros(&[h, w]);
    for i in 0..h {
        for j in 0..w {
            let (x, y) = grid.position(i, j);
            if !gt.contains(x, y) {
                continue;
            }
            let v = i * w + j;
            let t = targets.data_mut();
            t[v] = x - gt.x0;
            t[plane + v] = y - gt.y0;
            t[2 * plane + v] = gt.x1 - x;
            t[3 * plane + v] = gt.y1 - y;
            mask.data_mut()[v] = 1.0;
        }
    }
    Ok((targets, mask))
}

/// 1 where the cell is within `radius` image pixels of the box centre.
pub fn classification_labels_regular(gt: &BBox, grid: &GridSpec, radius: Real) -> Result<Tensor> {
    if !(radius > 0.0) {
        return Err(usage_err!("label radius must be positive, got {}", radius));
    }
    let (cx, cy) = (gt.cx(), gt.cy());
    let r2 = radius * radius;
    let mut out = Tensor::zeros(&[grid.height, grid.width]);
    for i in 0..grid.height {
        for j in 0..grid.width {
            let (x, y) = grid.position(i, j);
            let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            if d2 <= r2 {
                out.data_mut()[i * grid.width + j] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Per-cell IoU between the decoded corner-form boxes `[4, H, W]` and `gt`,
/// zero where `reg_mask` is 0.
pub fn objectaware_labels(pred_boxes: &Tensor, gt: &BBox, reg_mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = pred_boxes.dims3()?;
    if c != 4 || reg_mask.shape() != [h, w] {
        return Err(shape_err!("boxes {:?} / mask {:?} mismatch", pred_boxes.shape(), reg_mask.shape()));
    }
    let plane = h * w;
    let b = pred_boxes.data();
    Ok(Tensor::from_fn(&[h, w], |v| {
        if reg_mask.data()[v] == 0.0 {
            return 0.0;
        }
        let pred = BBox::new(b[v], b[plane + v], b[2 * plane + v], b[3 * plane + v]);
        iou(&pred, gt)
    }))
}

/// Inverts the distance encoding: cell `(x, y)` with `(l, t, r, b)` becomes
/// the corner box `(x - l, y - t, x + r, y + b)`.
pub fn decode_boxes(reg_pred: &Tensor, grid: &GridSpec) -> Result<Tensor> {
    let (c, h, w) = reg_pred.dims3()?;
    if c != 4 || h != grid.height || w != grid.width {
        return Err(shape_err!("regression map {:?} does not match {}x{} grid", reg_pred.shape(), grid.height, grid.width));
    }
    if let Some(v) = reg_pred.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(usage_err!("regression distances must be nonnegative, found {}", v));
    }
    let plane = h * w;
    let d = reg_pred.data();
    let mut out = Tensor::zeros(&[4, h, w]);
    let o = out.data_mut();
    for i in 0..h {
        for j in 0..w {
            let (x, y) = grid.position(i, j);
            let v = i * w + j;
            o[v] = x - d[v];
            o[plane + v] = y - d[plane + v];
            o[2 * plane + v] = x + d[2 * plane + v];
            o[3 * plane + v] = y + d[3 * plane + v];
        }
    }
    Ok(out)
}

/// Box stored at cell index `v` of a corner-form `[4, H, W]` map.
pub fn box_at(boxes: &Tensor, v: usize) -> BBox {
    let plane = boxes.shape()[1] * boxes.shape()[2];
    let b = boxes.data();
    BBox::new(b[v], b[plane + v], b[2 * plane + v], b[3 * plane + v])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eq1_direct_substitution() {
        let gt = BBox::new(10.0, 20.0, 50.0, 60.0);
        // cell (i=4, j=2) with stride 10, offset 10 sits at (30, 50)
        let grid = GridSpec::new(6, 6, 10.0, 10.0);
        let (t, m) = regression_targets(&gt, &grid).unwrap();
        let v = 2 * 6 + 2; // (30, 30)
        assert_eq!([t.data()[v], t.data()[36 + v], t.data()[72 + v], t.data()[108 + v]], [20.0, 10.0, 20.0, 30.0]);
        // cell exactly at (x0, y0) = (10, 20): i = 1, j = 0
        let corner = GridSpec::new(6, 6, 10.0, 10.0).position(1, 0);
        assert_eq!(corner, (10.0, 20.0));
        let v = 6;
        assert_eq!(m.data()[v], 1.0);
        assert_eq!([t.data()[v], t.data()[36 + v], t.data()[72 + v], t.data()[108 + v]], [0.0, 0.0, 40.0, 40.0]);
    }

    #[test]
    fn centre_cell_target() {
        let gt = BBox::new(10.0, 20.0, 50.0, 60.0);
        let g2 = GridSpec::new(6, 4, 10.0, 0.0); // cell (4, 3) -> (30, 40)
        let (t, _) = regression_targets(&gt, &g2).unwrap();
        let v = 4 * 4 + 3;
        let p = 24;
        assert_eq!([t.data()[v], t.data()[p + v], t.data()[2 * p + v], t.data()[3 * p + v]], [20.0; 4]);
    }

    #[test]
    fn zero_area_is_degenerate() {
        let grid = GridSpec::new(4, 4, 8.0, 0.0);
        assert!(matches!(
            regression_targets(&BBox::new(5.0, 5.0, 5.0, 9.0), &grid),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn small_radius_single_positive_and_infinite_radius() {
        let grid = GridSpec::new(9, 9, 8.0, 32.0);
        let gt = BBox::from_center(64.0, 64.0, 30.0, 30.0);
        let one = classification_labels_regular(&gt, &grid, 3.0).unwrap();
        assert_eq!(one.sum(), 1.0);
        assert_eq!(one.at2(4, 4), 1.0);
        let all = classification_labels_regular(&gt, &grid, Real::INFINITY).unwrap();
        assert_eq!(all.sum(), 81.0);
        assert!(classification_labels_regular(&gt, &grid, 0.0).is_err());
    }

    #[test]
    fn decode_degenerate_and_negative() {
        let grid = GridSpec::new(2, 2, 8.0, 4.0);
        let zeros = Tensor::zeros(&[4, 2, 2]);
        let boxes = decode_boxes(&zeros, &grid).unwrap();
        assert_eq!(box_at(&boxes, 3), BBox::new(12.0, 12.0, 12.0, 12.0));
        let mut neg = zeros.clone();
        neg.data_mut()[5] = -1.0;
        assert!(matches!(decode_boxes(&neg, &grid), Err(Error::Usage(_))));
    }

    #[test]
    fn objectaware_exact_and_disjoint() {
        let grid = GridSpec::new(3, 3, 8.0, 8.0);
        let gt = BBox::new(4.0, 4.0, 28.0, 28.0);
        let (t, m) = regression_targets(&gt, &grid).unwrap();
        let boxes = decode_boxes(&t, &grid).unwrap();
        let lab = objectaware_labels(&boxes, &gt, &m).unwrap();
        assert!(lab.data().iter().all(|&v| v == 1.0));
        let far = Tensor::from_fn(&[4, 3, 3], |i| 500.0 + (i / 9 >= 2) as u8 as Real * 10.0);
        let lab = objectaware_labels(&far, &gt, &m).unwrap();
        assert!(lab.data().iter().all(|&v| v == 0.0));
    }
}
