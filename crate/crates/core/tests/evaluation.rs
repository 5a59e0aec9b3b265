//! Metrics, protocols and synthetic sequences.

use ocean_core::geometry::BBox;
use ocean_core::harness::metrics::{
    aggregate, evaluate, run_sequence, score_predictions, FrameOutcome, OracleTracker, Protocol,
    StaticTracker, RESTART_SKIP,
};
use ocean_core::harness::{gen_sequence, FrameSource, Scene, Sequence, SyntheticSceneConfig};
use ocean_core::tracker::Tracker;
use ocean_core::{Real, Result, Tensor};
use proptest::prelude::*;

fn per_frame_iou(a: &BBox, b: &BBox) -> Real {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    inter / ((a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter)
}

fn moving(seed: u64) -> SyntheticSceneConfig {
    SyntheticSceneConfig { num_frames: 40, velocity: (2.5, -1.0), ..SyntheticSceneConfig::easy(seed) }
}

#[test]
fn oracle_scores_perfectly() {
    let seq = gen_sequence(&moving(1)).unwrap();
    let r = run_sequence(&mut OracleTracker::new(&seq.gt), &seq, Protocol::Restart).unwrap();
    let m = aggregate(&[r]).unwrap();
    assert_eq!((m.ao, m.sr50, m.auc, m.precision20, m.failures), (1.0, 1.0, 1.0, 1.0, 0));
    assert_eq!(m.frames, 39);
}

#[test]
fn static_box_ao_matches_direct_computation() {
    let seqs: Vec<Sequence> = (0..4).map(|s| gen_sequence(&moving(s)).unwrap()).collect();
    let refs: Vec<&dyn FrameSource> = seqs.iter().map(|s| s as &dyn FrameSource).collect();
    let (m, _) = evaluate(&mut || Box::new(StaticTracker::default()) as Box<dyn Tracker>, &refs, Protocol::Continuous).unwrap();
    let ious: Vec<Real> = seqs.iter().flat_map(|s| s.gt[1..].iter().map(|g| per_frame_iou(&s.gt[0], g))).collect();
    let want = ious.iter().sum::<Real>() / ious.len() as Real;
    assert!((m.ao - want).abs() < 1e-12, "{} vs {}", m.ao, want);
    assert!(m.ao < 0.9);
}

#[test]
fn precision_is_one_when_all_centres_are_close() {
    let gt: Vec<BBox> = (0..20).map(|i| BBox::new(i as Real, 0.0, i as Real + 30.0, 30.0)).collect();
    let pred: Vec<BBox> = gt.iter().map(|b| b.translate(12.0, -15.0)).collect();
    let m = aggregate(&[score_predictions(&pred, &gt).unwrap()]).unwrap();
    assert_eq!(m.precision20, 1.0);
    assert!(m.ao < 1.0);
}

#[test]
fn continuous_failures_count_entries_into_zero_overlap() {
    let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0); 8];
    let far = BBox::new(50.0, 50.0, 60.0, 60.0);
    let pred = vec![gt[0], gt[0], far, far, gt[0], far, gt[0], gt[0]];
    let r = score_predictions(&pred, &gt).unwrap();
    assert_eq!(r.failures, 2);
    assert_eq!(r.ious.len(), 7);
}

/// Reports groundtruth except on the listed frames, where it reports a far box.
struct FailsAt {
    gt: Vec<BBox>,
    bad: Vec<usize>,
    t: usize,
}

impl Tracker for FailsAt {
    fn init(&mut self, _frame: &Tensor, bbox: BBox) -> Result<()> {
        self.t = self.gt.iter().position(|b| *b == bbox).unwrap();
        Ok(())
    }

    fn update(&mut self, _frame: &Tensor) -> Result<BBox> {
        self.t += 1;
        Ok(if self.bad.contains(&self.t) { self.gt[self.t].translate(500.0, 500.0) } else { self.gt[self.t] })
    }
}

#[test]
fn restart_skips_then_reinitializes() {
    let mut cfg = moving(2);
    cfg.velocity = (1.0, 0.0);
    let seq = gen_sequence(&cfg).unwrap();
    let mut t = FailsAt { gt: seq.gt.clone(), bad: vec![3, 8, 20], t: 0 };
    let r = run_sequence(&mut t, &seq, Protocol::Restart).unwrap();
    // Frames 4..8 are skipped after the failure at 3 and frame 8 reinitializes,
    // so the bad box scripted for frame 8 is never reported.
    assert_eq!(r.failures, 2);
    assert_eq!(r.outcomes[3 + RESTART_SKIP], FrameOutcome::Init(seq.gt[8]));
    assert!((4..8).all(|t| r.outcomes[t] == FrameOutcome::Skipped));
    assert_eq!(r.outcomes[20 + RESTART_SKIP], FrameOutcome::Init(seq.gt[25]));
    let scored = r.outcomes.iter().filter(|o| matches!(o, FrameOutcome::Tracked(_))).count();
    assert_eq!(scored, r.ious.len());
    assert_eq!(r.ious.len(), 40 - 3 - 2 * (RESTART_SKIP - 1));
}

#[test]
fn mismatched_logs_are_rejected() {
    let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0); 5];
    assert!(score_predictions(&gt[..4], &gt).is_err());
    assert!(score_predictions(&[], &[]).is_err());
}

#[test]
fn generated_sequences_are_reproducible() {
    let a = gen_sequence(&SyntheticSceneConfig::hard(9)).unwrap();
    let b = gen_sequence(&SyntheticSceneConfig::hard(9)).unwrap();
    assert_eq!(a, b);
    let c = gen_sequence(&SyntheticSceneConfig::hard(10)).unwrap();
    assert_ne!(a.frames, c.frames);
}

#[test]
fn velocity_moves_the_centre_until_the_wall() {
    let cfg = SyntheticSceneConfig { velocity: (2.0, 0.0), scale_drift: 0.0, start: (60.0, 96.0), ..Default::default() };
    let scene = Scene::new(&cfg).unwrap();
    let gt = scene.groundtruth();
    let right_limit = cfg.frame_width as Real - cfg.target_width as Real / 2.0;
    for t in 1..gt.len() {
        if gt[t].cx() >= right_limit - 2.0 {
            break;
        }
        assert!((gt[t].cx() - gt[t - 1].cx() - 2.0).abs() < 1e-9, "frame {}", t);
        assert_eq!(gt[t].cy(), gt[0].cy());
    }
    assert!(gt.iter().all(|b| b.x0 >= 0.0 && b.x1 <= cfg.frame_width as Real));
}

#[test]
fn static_scene_has_constant_boxes() {
    let cfg = SyntheticSceneConfig { velocity: (0.0, 0.0), scale_drift: 0.0, ..Default::default() };
    let seq = gen_sequence(&cfg).unwrap();
    assert!(seq.gt.iter().all(|b| *b == seq.gt[0]));
}

proptest! {
    #[test]
    fn auc_is_mean_of_success_rates(ious in prop::collection::vec(0.0..=1.0f64, 1..200)) {
        let gt = vec![BBox::new(0.0, 0.0, 100.0, 1.0); ious.len() + 1];
        // Box of width 100*v inside a 100-wide groundtruth has overlap v.
        let pred: Vec<BBox> = std::iter::once(gt[0])
            .chain(ious.iter().map(|&v| BBox::new(0.0, 0.0, 100.0 * v as Real, 1.0)))
            .collect();
        let r = score_predictions(&pred, &gt).unwrap();
        let m = aggregate(&[r.clone()]).unwrap();
        let mut sum = 0.0;
        for tau in (0..=20).map(|i| i as Real * 0.05) {
            sum += r.ious.iter().filter(|&&v| v >= tau).count() as Real / r.ious.len() as Real;
        }
        prop_assert!((m.auc - sum / 21.0).abs() < 1e-12);
        for v in [m.ao, m.sr50, m.auc, m.precision20] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn continuous_scoring_is_pure(seed in 0u64..50) {
        let seq = gen_sequence(&SyntheticSceneConfig { num_frames: 10, ..SyntheticSceneConfig::easy(seed) }).unwrap();
        let pred: Vec<BBox> = seq.gt.iter().map(|b| b.translate(3.0, 1.0)).collect();
        prop_assert_eq!(score_predictions(&pred, &seq.gt).unwrap(), score_predictions(&pred, &seq.gt).unwrap());
    }
}
