//! Tracking metrics: average overlap, success rate and AUC, centre
//! precision, and the reset-on-failure protocol.

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::error::{usage_err, Result};
use crate::geometry::{iou, BBox};
use crate::harness::synth::FrameSource;
use crate::tensor::Real;
use crate::tracker::Tracker;

/// Frames skipped after a failure before the tracker is reinitialized.
pub const RESTART_SKIP: usize = 5;
/// Centre error threshold for precision, in pixels.
pub const PRECISION_PX: Real = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// One pass over each sequence from the first frame.
    Continuous,
    /// Reinitialize from groundtruth five frames after every zero-overlap frame.
    Restart,
}

/// Per-frame outcome of a tracking run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameOutcome {
    /// (Re)initialization from groundtruth; not scored.
    Init(BBox),
    Tracked(BBox),
    /// Skipped after a failure; not scored.
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub outcomes: Vec<FrameOutcome>,
    /// Overlap of every scored frame.
    pub ious: Vec<Real>,
    pub center_errors: Vec<Real>,
    pub failures: usize,
}

impl SequenceResult {
    /// Boxes in log order; skipped frames carry `None`.
    pub fn boxes(&self) -> Vec<Option<BBox>> {
        self.outcomes
            .iter()
            .map(|o| match o {
                FrameOutcome::Init(b) | FrameOutcome::Tracked(b) => Some(*b),
                FrameOutcome::Skipped => None,
            })
            .collect()
    }

    pub fn ao(&self) -> Real {
        mean(&self.ious)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ao: Real,
    pub sr50: Real,
    pub auc: Real,
    pub precision20: Real,
    pub failures: usize,
    pub frames: usize,
    pub sequences: usize,
}

/// Overlap thresholds of the success curve: 0, 0.05, ..., 1.
pub fn success_thresholds() -> [Real; 21] {
    core::array::from_fn(|i| i as Real * 0.05)
}

fn mean(v: &[Real]) -> Real {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<Real>() / v.len() as Real
    }
}

/// Fraction of overlaps at or above `tau`.
pub fn success_rate(ious: &[Real], tau: Real) -> Real {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().filter(|&&v| v >= tau).count() as Real / ious.len() as Real
}

fn center_error(a: &BBox, b: &BBox) -> Real {
    let dx = a.cx() - b.cx();
    let dy = a.cy() - b.cy();
    (dx * dx + dy * dy).sqrt()
}

fn check_gt(gt: &[BBox]) -> Result<()> {
    if gt.is_empty() {
        return Err(usage_err!("sequence has no groundtruth"));
    }
    Ok(())
}

/// Scores a continuous prediction log against groundtruth. The first
/// frame echoes the initial box and is not scored.
pub fn score_predictions(pred: &[BBox], gt: &[BBox]) -> Result<SequenceResult> {
    check_gt(gt)?;
    if pred.len() != gt.len() {
        return Err(usage_err!("{} predictions for {} groundtruth boxes", pred.len(), gt.len()));
    }
    let mut outcomes = Vec::with_capacity(pred.len());
    let mut ious = Vec::new();
    let mut errs = Vec::new();
    let mut failures = 0;
    for (t, (p, g)) in pred.iter().zip(gt).enumerate() {
        if t == 0 {
            outcomes.push(FrameOutcome::Init(*p));
            continue;
        }
        let o = iou(p, g);
        // Count each transition into zero overlap as a lost track.
        if o <= 0.0 && ious.last().map_or(true, |&prev: &Real| prev > 0.0) {
            failures += 1;
        }
        outcomes.push(FrameOutcome::Tracked(*p));
        ious.push(o);
        errs.push(center_error(p, g));
    }
    Ok(SequenceResult { outcomes, ious, center_errors: errs, failures })
}

/// Runs a tracker over a sequence under the given protocol.
pub fn run_sequence(tracker: &mut dyn Tracker, seq: &dyn FrameSource, protocol: Protocol) -> Result<SequenceResult> {
    let gt = seq.groundtruth();
    check_gt(gt)?;
    if seq.len() != gt.len() {
        return Err(usage_err!("{} frames for {} groundtruth boxes", seq.len(), gt.len()));
    }
    if protocol == Protocol::Continuous {
        let mut pred = Vec::with_capacity(gt.len());
        tracker.init(&seq.frame(0)?, gt[0])?;
        pred.push(gt[0]);
        for t in 1..gt.len() {
            pred.push(tracker.update(&seq.frame(t)?)?);
        }
        return score_predictions(&pred, gt);
    }

    let mut outcomes = Vec::with_capacity(gt.len());
    let mut ious = Vec::new();
    let mut errs = Vec::new();
    let mut failures = 0;
    let mut reinit_at = Some(0);
    let mut t = 0;
    while t < gt.len() {
        if reinit_at == Some(t) {
            tracker.init(&seq.frame(t)?, gt[t])?;
            outcomes.push(FrameOutcome::Init(gt[t]));
            reinit_at = None;
        } else if reinit_at.is_some() {
            outcomes.push(FrameOutcome::Skipped);
        } else {
            let b = tracker.update(&seq.frame(t)?)?;
            let o = iou(&b, &gt[t]);
            outcomes.push(FrameOutcome::Tracked(b));
            ious.push(o);
            errs.push(center_error(&b, &gt[t]));
            if o <= 0.0 {
                failures += 1;
                reinit_at = Some(t + RESTART_SKIP);
            }
        }
        t += 1;
    }
    Ok(SequenceResult { outcomes, ious, center_errors: errs, failures })
}

/// Pools scored frames over all sequences.
pub fn aggregate(results: &[SequenceResult]) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(usage_err!("no sequences to aggregate"));
    }
    let ious: Vec<Real> = results.iter().flat_map(|r| r.ious.iter().copied()).collect();
    let errs: Vec<Real> = results.iter().flat_map(|r| r.center_errors.iter().copied()).collect();
    let taus = success_thresholds();
    let auc = taus.iter().map(|&t| success_rate(&ious, t)).sum::<Real>() / taus.len() as Real;
    let precision20 = if errs.is_empty() {
        0.0
    } else {
        errs.iter().filter(|&&e| e <= PRECISION_PX).count() as Real / errs.len() as Real
    };
    Ok(MetricsReport {
        ao: mean(&ious),
        sr50: success_rate(&ious, 0.5),
        auc,
        precision20,
        failures: results.iter().map(|r| r.failures).sum(),
        frames: ious.len(),
        sequences: results.len(),
    })
}

/// Evaluates a fresh tracker from `make` on every sequence.
pub fn evaluate<'a>(
    make: &mut dyn FnMut() -> Box<dyn Tracker + 'a>,
    sequences: &[&dyn FrameSource],
    protocol: Protocol,
) -> Result<(MetricsReport, Vec<SequenceResult>)> {
    if sequences.is_empty() {
        return Err(usage_err!("evaluation needs at least one sequence"));
    }
    let results = sequences
        .iter()
        .map(|s| run_sequence(make().as_mut(), *s, protocol))
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&results)?, results))
}

/// Tracker that reports groundtruth, for checking the evaluation itself.
pub struct OracleTracker {
    gt: Vec<BBox>,
    t: usize,
}

impl OracleTracker {
    pub fn new(gt: &[BBox]) -> Self {
        Self { gt: gt.to_vec(), t: 0 }
    }
}

impl Tracker for OracleTracker {
    fn init(&mut self, _frame: &crate::Tensor, bbox: BBox) -> Result<()> {
        self.t = self.gt.iter().position(|b| *b == bbox).unwrap_or(0);
        Ok(())
    }

    fn update(&mut self, _frame: &crate::Tensor) -> Result<BBox> {
        self.t += 1;
        self.gt.get(self.t).copied().ok_or_else(|| usage_err!("oracle ran past the groundtruth"))
    }
}

/// Baseline that keeps reporting its initial box.
#[derive(Debug, Default)]
pub struct StaticTracker {
    bbox: Option<BBox>,
}

impl Tracker for StaticTracker {
    fn init(&mut self, _frame: &crate::Tensor, bbox: BBox) -> Result<()> {
        self.bbox = Some(bbox);
        Ok(())
    }

    fn update(&mut self, _frame: &crate::Tensor) -> Result<BBox> {
        self.bbox.ok_or_else(|| usage_err!("tracker used before init"))
    }
}
