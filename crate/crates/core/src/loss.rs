//! Training objective: IoU regression loss, balanced cross-entropy for the
//! two classifiers, and their weighted sum.

use alloc::format;

use crate::autodiff::{Reduction, BCE_EPS, IOU_EPS};
use crate::error::{numeric_err, shape_err, usage_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Weights of the object-aware and regular classification terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: Real,
    pub lambda2: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {:?}", self)));
        }
        Ok(())
    }
}

/// `L = l_reg + lambda1 * l_o + lambda2 * l_r`
pub fn total_loss(l_reg: Real, l_o: Real, l_r: Real, weights: &LossWeights) -> Result<Real> {
    let total = l_reg + weights.lambda1 * l_o + weights.lambda2 * l_r;
    if !total.is_finite() {
        return Err(numeric_err!("non-finite loss components ({}, {}, {})", l_reg, l_o, l_r));
    }
    Ok(total)
}

/// IoU of two boxes sharing an anchor point, given as side distances.
#[inline]
fn distance_iou(p: [Real; 4], t: [Real; 4]) -> (Real, Real, Real, Real, Real) {
    let [l, tp, r, b] = p;
    let [ls, ts, rs, bs] = t;
    let area_p = (l + r) * (tp + b);
    let area_t = (ls + rs) * (ts + bs);
    let iw = l.min(ls) + r.min(rs);
    let ih = tp.min(ts) + b.min(bs);
    let inter = iw * ih;
    let union = area_p + area_t - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    (iou, inter, union, iw, ih)
}

fn check_iou_inputs(pred: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<(usize, Real)> {
    let (c, h, w) = pred.dims3()?;
    if c != 4 || targets.shape() != pred.shape() || mask.shape() != [h, w] {
        return Err(shape_err!(
            "iou loss shapes: pred {:?}, targets {:?}, mask {:?}",
            pred.shape(),
            targets.shape(),
            mask.shape()
        ));
    }
    let count = mask.data().iter().filter(|&&m| m != 0.0).count();
    if count == 0 {
        return Err(Error::Degenerate("iou loss mask has no positive cell".into()));
    }
    Ok((h * w, count as Real))
}

#[inline]
fn cell(t: &Tensor, plane: usize, v: usize) -> [Real; 4] {
    let d = t.data();
    [d[v], d[plane + v], d[2 * plane + v], d[3 * plane + v]]
}

pub(crate) fn iou_loss_value(pred: &Tensor, targets: &Tensor, mask: &Tensor, reduction: Reduction) -> Result<Real> {
    let (plane, count) = check_iou_inputs(pred, targets, mask)?;
    let mut total: Real = 0.0;
    for v in 0..plane {
        if mask.data()[v] == 0.0 {
            continue;
        }
        let (iou, ..) = distance_iou(cell(pred, plane, v), cell(targets, plane, v));
        total -= iou.max(IOU_EPS).min(1.0).ln();
    }
    let value = match reduction {
        Reduction::Mean => total / count,
        Reduction::Sum => total,
    };
    if !value.is_finite() {
        return Err(numeric_err!("iou loss is not finite"));
    }
    Ok(value)
}

pub(crate) fn iou_loss_grad(pred: &Tensor, targets: &Tensor, mask: &Tensor, reduction: Reduction) -> Result<Tensor> {
    let (plane, count) = check_iou_inputs(pred, targets, mask)?;
    let norm = match reduction {
        Reduction::Mean => 1.0 / count,
        Reduction::Sum => 1.0,
    };
    let mut grad = Tensor::zeros(pred.shape());
    for v in 0..plane {
        if mask.data()[v] == 0.0 {
            continue;
        }
        let p = cell(pred, plane, v);
        let t = cell(targets, plane, v);
        let (iou, inter, union, iw, ih) = distance_iou(p, t);
        if !(iou > IOU_EPS) || inter <= 0.0 {
            continue;
        }
        // d area_p / d side
        let dx_lr = p[1] + p[3];
        let dx_tb = p[0] + p[2];
        // d inter / d side: only the side that is the current minimum moves
        let di = [
            if p[0] < t[0] { ih } else { 0.0 },
            if p[1] < t[1] { iw } else { 0.0 },
            if p[2] < t[2] { ih } else { 0.0 },
            if p[3] < t[3] { iw } else { 0.0 },
        ];
        let dx = [dx_lr, dx_tb, dx_lr, dx_tb];
        // L = -ln(I) + ln(U), U = X + X* - I
        for s in 0..4 {
            let dl = -di[s] / inter + (dx[s] - di[s]) / union;
            grad.data_mut()[s * plane + v] = dl * norm;
        }
    }
    Ok(grad)
}

/// Mean (or sum) over masked cells of `-ln IoU` between the boxes encoded
/// by predicted and target distances. IoU is clamped to `[1e-6, 1]`.
pub fn iou_loss(reg_pred: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Real> {
    if reg_pred.data().iter().any(|&v| v < 0.0) {
        return Err(usage_err!("iou loss needs nonnegative predicted distances"));
    }
    iou_loss_value(reg_pred, targets, mask, Reduction::Mean)
}

/// Per-class normalisation of the balanced cross-entropy.
fn bce_weights(pos: &Tensor, neg: &Tensor) -> Result<(Real, Real)> {
    let n_pos = pos.data().iter().filter(|&&m| m != 0.0).count();
    let n_neg = neg.data().iter().filter(|&&m| m != 0.0).count();
    if pos.data().iter().zip(neg.data()).any(|(&a, &b)| a != 0.0 && b != 0.0) {
        return Err(usage_err!("positive and negative masks overlap"));
    }
    match (n_pos, n_neg) {
        (0, 0) => Err(Error::Degenerate("cross-entropy has neither positives nor negatives".into())),
        (0, n) => Ok((0.0, 1.0 / n as Real)),
        (p, 0) => Ok((1.0 / p as Real, 0.0)),
        (p, n) => Ok((0.5 / p as Real, 0.5 / n as Real)),
    }
}

fn check_bce(pred: &Tensor, labels: &Tensor, pos: &Tensor, neg: &Tensor) -> Result<()> {
    if labels.shape() != pred.shape() || pos.shape() != pred.shape() || neg.shape() != pred.shape() {
        return Err(shape_err!(
            "bce shapes: pred {:?}, labels {:?}, pos {:?}, neg {:?}",
            pred.shape(),
            labels.shape(),
            pos.shape(),
            neg.shape()
        ));
    }
    Ok(())
}

/// Binary cross-entropy on probabilities with soft-label support. Positives
/// and negatives each contribute half of the loss; when one set is empty
/// the other carries all of it.
pub fn bce_loss(pred: &Tensor, labels: &Tensor, pos: &Tensor, neg: &Tensor) -> Result<Real> {
    check_bce(pred, labels, pos, neg)?;
    let (wp, wn) = bce_weights(pos, neg)?;
    let mut total: Real = 0.0;
    for i in 0..pred.len() {
        let wt = if pos.data()[i] != 0.0 {
            wp
        } else if neg.data()[i] != 0.0 {
            wn
        } else {
            continue;
        };
        let p = pred.data()[i].max(BCE_EPS).min(1.0 - BCE_EPS);
        let y = labels.data()[i];
        total -= wt * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    if !total.is_finite() {
        return Err(numeric_err!("cross-entropy is not finite"));
    }
    Ok(total)
}

pub(crate) fn bce_loss_grad(pred: &Tensor, labels: &Tensor, pos: &Tensor, neg: &Tensor) -> Result<Tensor> {
    check_bce(pred, labels, pos, neg)?;
    let (wp, wn) = bce_weights(pos, neg)?;
    Ok(Tensor::from_fn(pred.shape(), |i| {
        let wt = if pos.data()[i] != 0.0 {
            wp
        } else if neg.data()[i] != 0.0 {
            wn
        } else {
            return 0.0;
        };
        let p = pred.data()[i];
        if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
            return 0.0;
        }
        let y = labels.data()[i];
        wt * (-y / p + (1.0 - y) / (1.0 - p))
    }))
}
