//! Inference state machine: cropping, score fusion, shape-change penalty,
//! window prior, box decoding and size smoothing.

use alloc::boxed::Box;
use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{shape_err, usage_err, Error, Result};
use crate::geometry::{BBox, GridSpec};
use crate::image::crop_resize;
use crate::labels::{box_at, decode_boxes};
use crate::network::{exemplar_feature, predict, preprocess, ModelParams, NetConfig, Prediction};
use crate::tensor::{Real, Tensor};

/// How the shape-change penalty treats a change product `c >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyMode {
    /// `exp(-k (c - 1))`: equals 1 without change and shrinks as change grows.
    Suppressive,
    /// `exp(k c)`, the formula exactly as printed, which grows with change.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackHyper {
    /// Weight of the object-aware score in the fused map.
    pub omega: Real,
    pub k_pen: Real,
    /// Size smoothing factor; 1 takes the new size unchanged.
    pub beta: Real,
    pub omega_online: Real,
    /// Blend weight of the cosine window prior.
    pub window_weight: Real,
    pub penalty_mode: PenaltyMode,
    /// Lower bound on tracked width and height, in frame pixels.
    pub min_size: Real,
}

impl Default for TrackHyper {
    fn default() -> Self {
        Self {
            omega: 0.07,
            k_pen: 0.021,
            beta: 0.7,
            omega_online: 0.5,
            window_weight: 0.3,
            penalty_mode: PenaltyMode::Suppressive,
            min_size: 4.0,
        }
    }
}

impl TrackHyper {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: Real| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(alloc::format!("{} must lie in [0, 1], got {}", name, v)))
            }
        };
        unit("omega", self.omega)?;
        unit("beta", self.beta)?;
        unit("omega_online", self.omega_online)?;
        unit("window_weight", self.window_weight)?;
        if !(self.k_pen >= 0.0) || !self.k_pen.is_finite() {
            return Err(Error::Config(alloc::format!("k_pen must be finite and >= 0, got {}", self.k_pen)));
        }
        if !(self.min_size > 0.0) {
            return Err(Error::Config(alloc::format!("min_size must be positive, got {}", self.min_size)));
        }
        Ok(())
    }
}

/// Anything that can produce head outputs for a search crop. Crops are
/// passed with pixel values in `[0, 1]`.
pub trait Scorer: Sync {
    fn exemplar_size(&self) -> usize;
    fn search_size(&self) -> usize;
    /// Score grid in search-crop pixels.
    fn grid(&self) -> GridSpec;
    fn exemplar_feature(&self, exemplar: &Tensor) -> Result<Tensor>;
    fn predict(&self, exemplar_feature: &Tensor, search: &Tensor) -> Result<Prediction>;
}

/// The Siamese network as a [`Scorer`].
#[derive(Debug, Clone, Copy)]
pub struct NetworkScorer<'a> {
    pub params: &'a ModelParams,
    pub cfg: &'a NetConfig,
}

impl<'a> NetworkScorer<'a> {
    pub fn new(params: &'a ModelParams, cfg: &'a NetConfig) -> Result<Self> {
        cfg.validate()?;
        params.check_against(cfg)?;
        Ok(Self { params, cfg })
    }
}

impl Scorer for NetworkScorer<'_> {
    fn exemplar_size(&self) -> usize {
        self.cfg.exemplar_size
    }

    fn search_size(&self) -> usize {
        self.cfg.search_size
    }

    fn grid(&self) -> GridSpec {
        self.cfg.grid()
    }

    fn exemplar_feature(&self, exemplar: &Tensor) -> Result<Tensor> {
        exemplar_feature(self.params, &preprocess(exemplar))
    }

    fn predict(&self, exemplar_feature: &Tensor, search: &Tensor) -> Result<Prediction> {
        predict(self.params, self.cfg, exemplar_feature, &preprocess(search))
    }
}

/// External score source fused with the offline classifier.
pub trait OnlineScoreProvider {
    fn init(&mut self, _frame: &Tensor, _bbox: &BBox) -> Result<()> {
        Ok(())
    }

    /// Scores for the current search crop on a `height x width` grid, or
    /// `None` to leave the offline map unchanged for this frame.
    fn scores(&mut self, search_crop: &Tensor, height: usize, width: usize) -> Result<Option<Tensor>>;
}

/// Square frame region resampled into a crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub x0: Real,
    pub y0: Real,
    /// Frame pixels per crop pixel.
    pub scale: Real,
}

impl CropWindow {
    pub fn new(cx: Real, cy: Real, size: Real, out: usize) -> Self {
        Self { x0: cx - size / 2.0, y0: cy - size / 2.0, scale: size / out as Real }
    }

    pub fn to_crop(&self, b: &BBox) -> BBox {
        let s = self.scale;
        BBox::new((b.x0 - self.x0) / s, (b.y0 - self.y0) / s, (b.x1 - self.x0) / s, (b.y1 - self.y0) / s)
    }

    pub fn to_frame(&self, b: &BBox) -> BBox {
        let s = self.scale;
        BBox::new(self.x0 + b.x0 * s, self.y0 + b.y0 * s, self.x0 + b.x1 * s, self.y0 + b.y1 * s)
    }
}

/// Side of the square context region around a `w x h` box.
pub fn context_size(w: Real, h: Real) -> Real {
    let p = (w + h) / 2.0;
    ((w + p) * (h + p)).sqrt()
}

/// Convex combination `omega * p_o + (1 - omega) * p_r`.
pub fn fuse_scores(p_o: &Tensor, p_r: &Tensor, omega: Real) -> Result<Tensor> {
    p_o.zip_map(p_r, |o, r| omega * o + (1.0 - omega) * r)
}

/// Convex combination with an online map; identity when none is supplied.
pub fn fuse_online(p_onl: Option<&Tensor>, p_cls_hat: &Tensor, omega_online: Real) -> Result<Tensor> {
    match p_onl {
        None => Ok(p_cls_hat.clone()),
        Some(p) => p.zip_map(p_cls_hat, |o, c| omega_online * o + (1.0 - omega_online) * c),
    }
}

/// Shape-change penalty between a candidate `(r, s)` and the previous `(r_prev, s_prev)`.
pub fn penalty(r: Real, r_prev: Real, s: Real, s_prev: Real, k_pen: Real, mode: PenaltyMode) -> Result<Real> {
    if !(r > 0.0 && r_prev > 0.0 && s > 0.0 && s_prev > 0.0) {
        return Err(usage_err!("penalty needs positive ratios and sizes, got r={} r'={} s={} s'={}", r, r_prev, s, s_prev));
    }
    let change = (r / r_prev).max(r_prev / r) * (s / s_prev).max(s_prev / s);
    Ok(match mode {
        PenaltyMode::Suppressive => (-k_pen * (change - 1.0)).exp(),
        PenaltyMode::Literal => (k_pen * change).exp(),
    })
}

pub fn smooth_scale(s_new: Real, s_prev: Real, beta: Real) -> Real {
    beta * s_new + (1.0 - beta) * s_prev
}

/// Outer product of two Hann windows, zero at the borders.
pub fn hann_window(h: usize, w: usize) -> Tensor {
    let hann = |n: usize| -> Vec<Real> {
        if n == 1 {
            return alloc::vec![1.0];
        }
        let pi = core::f64::consts::PI as Real;
        (0..n).map(|i| 0.5 - 0.5 * (2.0 * pi * i as Real / (n - 1) as Real).cos()).collect()
    };
    let (hy, hx) = (hann(h), hann(w));
    Tensor::from_fn(&[h, w], |v| hy[v / w] * hx[v % w])
}

/// Per-sequence tracking state.
#[derive(Debug, Clone)]
pub struct TrackerState {
    exemplar_feature: Tensor,
    pub prev_box: BBox,
    pub prev_ratio: Real,
    pub prev_size: Real,
    pub hyper: TrackHyper,
    window: Tensor,
}

impl TrackerState {
    pub fn exemplar_feature(&self) -> &Tensor {
        &self.exemplar_feature
    }
}

/// Result of one tracking step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub bbox: BBox,
    /// Final score map the cell was selected from.
    pub scores: Tensor,
    /// Selected `(row, col)`.
    pub cell: (usize, usize),
}

fn frame_dims(frame: &Tensor) -> Result<(Real, Real)> {
    let (c, h, w) = frame.dims3()?;
    if c != 3 {
        return Err(shape_err!("frames must have 3 channels, got {}", c));
    }
    Ok((w as Real, h as Real))
}

pub fn init(scorer: &dyn Scorer, frame: &Tensor, bbox: &BBox, hyper: &TrackHyper) -> Result<TrackerState> {
    hyper.validate()?;
    let (fw, fh) = frame_dims(frame)?;
    let b = bbox.clip(fw, fh);
    if !b.has_positive_area() {
        return Err(usage_err!("initial box {:?} has no area inside the frame", bbox));
    }
    let s_z = context_size(b.w(), b.h());
    let crop = crop_resize(frame, b.cx(), b.cy(), s_z, scorer.exemplar_size())?;
    let ef = scorer.exemplar_feature(&crop)?;
    let grid = scorer.grid();
    Ok(TrackerState {
        exemplar_feature: ef,
        prev_box: b,
        prev_ratio: b.w() / b.h(),
        prev_size: s_z,
        hyper: hyper.clone(),
        window: hann_window(grid.height, grid.width),
    })
}

pub fn track_step(
    scorer: &dyn Scorer,
    state: &mut TrackerState,
    frame: &Tensor,
    provider: Option<&mut dyn OnlineScoreProvider>,
) -> Result<StepOutput> {
    let (fw, fh) = frame_dims(frame)?;
    let hy = &state.hyper;
    let prev = state.prev_box;
    let s_x = context_size(prev.w(), prev.h()) * scorer.search_size() as Real / scorer.exemplar_size() as Real;
    let window = CropWindow::new(prev.cx(), prev.cy(), s_x, scorer.search_size());
    let crop = crop_resize(frame, prev.cx(), prev.cy(), s_x, scorer.search_size())?;
    let pred = scorer.predict(&state.exemplar_feature, &crop)?;
    let grid = scorer.grid();
    let boxes = decode_boxes(&pred.reg, &grid)?;
    let p_cls = fuse_scores(&pred.p_o, &pred.p_r, hy.omega)?;

    let mut penalized = p_cls;
    for (v, p) in penalized.data_mut().iter_mut().enumerate() {
        let b = window.to_frame(&box_at(&boxes, v));
        let (w, h) = (b.w().max(Real::epsilon()), b.h().max(Real::epsilon()));
        *p *= penalty(w / h, state.prev_ratio, context_size(w, h), state.prev_size, hy.k_pen, hy.penalty_mode)?;
    }

    let online = match provider {
        Some(p) => p.scores(&crop, grid.height, grid.width)?,
        None => None,
    };
    let fused = fuse_online(online.as_ref(), &penalized, hy.omega_online)?;
    let ww = hy.window_weight;
    let scores = fused.zip_map(&state.window, |p, h| p * ((1.0 - ww) + ww * h))?;
    if !scores.is_finite() {
        return Err(Error::Numeric("non-finite score map".into()));
    }
    let best = scores.argmax().ok_or_else(|| shape_err!("empty score map"))?;
    let cand = window.to_frame(&box_at(&boxes, best));

    let w = smooth_scale(cand.w(), prev.w(), hy.beta).clamp(hy.min_size, fw.max(hy.min_size));
    let h = smooth_scale(cand.h(), prev.h(), hy.beta).clamp(hy.min_size, fh.max(hy.min_size));
    let cx = cand.cx().clamp(0.0, fw);
    let cy = cand.cy().clamp(0.0, fh);
    let bbox = BBox::from_center(cx, cy, w, h);
    state.prev_box = bbox;
    state.prev_ratio = w / h;
    state.prev_size = context_size(w, h);
    Ok(StepOutput { bbox, scores, cell: (best / grid.width, best % grid.width) })
}

/// Per-sequence tracker as seen by the evaluation harness.
pub trait Tracker {
    fn init(&mut self, frame: &Tensor, bbox: BBox) -> Result<()>;
    fn update(&mut self, frame: &Tensor) -> Result<BBox>;
}

/// The full tracker: a scorer, hyperparameters and an optional online provider.
pub struct OceanTracker<'a> {
    scorer: &'a dyn Scorer,
    hyper: TrackHyper,
    provider: Option<Box<dyn OnlineScoreProvider + 'a>>,
    state: Option<TrackerState>,
    last_scores: Option<Tensor>,
}

impl<'a> OceanTracker<'a> {
    pub fn new(scorer: &'a dyn Scorer, hyper: TrackHyper) -> Self {
        Self { scorer, hyper, provider: None, state: None, last_scores: None }
    }

    pub fn with_provider(mut self, provider: Box<dyn OnlineScoreProvider + 'a>) -> Self {
        self.provider = Some(provider);
        self
    }

    pub fn state(&self) -> Option<&TrackerState> {
        self.state.as_ref()
    }

    /// Score map of the most recent step.
    pub fn last_scores(&self) -> Option<&Tensor> {
        self.last_scores.as_ref()
    }
}

impl Tracker for OceanTracker<'_> {
    fn init(&mut self, frame: &Tensor, bbox: BBox) -> Result<()> {
        let state = init(self.scorer, frame, &bbox, &self.hyper)?;
        if let Some(p) = self.provider.as_mut() {
            p.init(frame, &state.prev_box)?;
        }
        self.state = Some(state);
        self.last_scores = None;
        Ok(())
    }

    fn update(&mut self, frame: &Tensor) -> Result<BBox> {
        let state = self.state.as_mut().ok_or_else(|| usage_err!("tracker used before init"))?;
        let provider = self.provider.as_mut().map(|p| &mut **p as &mut dyn OnlineScoreProvider);
        let out = track_step(self.scorer, state, frame, provider)?;
        self.last_scores = Some(out.scores);
        Ok(out.bbox)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_values() {
        let m = PenaltyMode::Suppressive;
        assert_eq!(penalty(1.0, 1.0, 3.0, 3.0, 0.021, m).unwrap(), 1.0);
        let a = penalty(2.0, 1.0, 3.0, 3.0, 0.021, m).unwrap();
        assert!((a - (-0.021 as Real).exp()).abs() < 1e-12);
        assert!(penalty(0.0, 1.0, 1.0, 1.0, 0.1, m).is_err());
    }

    #[test]
    fn fusion_values() {
        let o = Tensor::full(&[1, 1], 0.8);
        let r = Tensor::full(&[1, 1], 0.6);
        assert!((fuse_scores(&o, &r, 0.07).unwrap().data()[0] - 0.614).abs() < 1e-12);
        let onl = Tensor::full(&[1, 1], 0.2);
        assert!((fuse_online(Some(&onl), &r, 0.5).unwrap().data()[0] - 0.4).abs() < 1e-12);
        assert!((smooth_scale(10.0, 20.0, 0.7) - 13.0).abs() < 1e-12);
    }

    #[test]
    fn context_of_square() {
        assert!((context_size(10.0, 10.0) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn crop_window_round_trip() {
        let w = CropWindow::new(50.0, 40.0, 64.0, 128);
        let b = BBox::new(30.0, 20.0, 60.0, 45.0);
        let back = w.to_frame(&w.to_crop(&b));
        assert!((back.x0 - b.x0).abs() < 1e-12 && (back.y1 - b.y1).abs() < 1e-12);
    }
}
