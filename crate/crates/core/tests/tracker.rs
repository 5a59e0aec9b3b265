//! Tracker behaviour with a scripted scorer in place of the network.

use ocean_core::geometry::{BBox, GridSpec};
use ocean_core::network::Prediction;
use ocean_core::tracker::{
    context_size, fuse_online, fuse_scores, init, penalty, track_step, CropWindow, OceanTracker, OnlineScoreProvider,
    PenaltyMode, Scorer, TrackHyper, Tracker,
};
use ocean_core::{Real, Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXEMPLAR: usize = 64;
const SEARCH: usize = 128;

/// Returns the same head outputs for every crop.
struct Scripted {
    reg: Tensor,
    p_r: Tensor,
    p_o: Tensor,
}

fn grid() -> GridSpec {
    GridSpec::centered(9, 8.0, SEARCH as Real)
}

impl Scripted {
    /// Every cell predicts a `w x h` (crop pixel) box centred on itself.
    fn uniform_boxes(w: Real, h: Real, p_r: Tensor, p_o: Tensor) -> Self {
        let g = grid();
        let reg = Tensor::from_fn(&[4, g.height, g.width], |i| if i / g.cells() % 2 == 0 { w / 2.0 } else { h / 2.0 });
        Self { reg, p_r, p_o }
    }

    fn scaled(&self, c: Real) -> Self {
        Self { reg: self.reg.clone(), p_r: self.p_r.map(|v| v * c), p_o: self.p_o.map(|v| v * c) }
    }
}

impl Scorer for Scripted {
    fn exemplar_size(&self) -> usize {
        EXEMPLAR
    }

    fn search_size(&self) -> usize {
        SEARCH
    }

    fn grid(&self) -> GridSpec {
        grid()
    }

    fn exemplar_feature(&self, _exemplar: &Tensor) -> Result<Tensor> {
        Ok(Tensor::zeros(&[1, 1, 1]))
    }

    fn predict(&self, _ef: &Tensor, search: &Tensor) -> Result<Prediction> {
        assert_eq!(search.shape(), [3, SEARCH, SEARCH]);
        Ok(Prediction { reg: self.reg.clone(), p_r: self.p_r.clone(), p_o: self.p_o.clone() })
    }
}

fn frame() -> Tensor {
    Tensor::full(&[3, 200, 240], 0.5)
}

fn start() -> BBox {
    BBox::new(100.0, 80.0, 132.0, 104.0)
}

fn search_window(b: &BBox) -> CropWindow {
    let s_x = context_size(b.w(), b.h()) * SEARCH as Real / EXEMPLAR as Real;
    CropWindow::new(b.cx(), b.cy(), s_x, SEARCH)
}

fn peak_at(i: usize, j: usize, floor: Real) -> Tensor {
    Tensor::from_fn(&[9, 9], |v| if v == i * 9 + j { 1.0 } else { floor })
}

#[test]
fn moves_to_the_planted_peak() {
    let b = start();
    let win = search_window(&b);
    let (w, h) = (b.w() / win.scale, b.h() / win.scale);
    for (i, j) in [(4, 4), (2, 6), (7, 1)] {
        let s = Scripted::uniform_boxes(w, h, peak_at(i, j, 0.05), peak_at(i, j, 0.05));
        let hyper = TrackHyper::default();
        let mut state = init(&s, &frame(), &b, &hyper).unwrap();
        let out = track_step(&s, &mut state, &frame(), None).unwrap();
        assert_eq!(out.cell, (i, j));
        let (x, y) = grid().position(i, j);
        assert!((out.bbox.cx() - (win.x0 + x * win.scale)).abs() < 1e-9);
        assert!((out.bbox.cy() - (win.y0 + y * win.scale)).abs() < 1e-9);
        // The predicted size equals the previous one, so smoothing keeps it.
        assert!((out.bbox.w() - b.w()).abs() < 1e-9 && (out.bbox.h() - b.h()).abs() < 1e-9);
    }
}

#[test]
fn size_is_smoothed_toward_the_prediction() {
    let b = start();
    let win = search_window(&b);
    let s = Scripted::uniform_boxes(2.0 * b.w() / win.scale, b.h() / win.scale, peak_at(4, 4, 0.0), peak_at(4, 4, 0.0));
    let hyper = TrackHyper { beta: 0.25, ..TrackHyper::default() };
    let mut state = init(&s, &frame(), &b, &hyper).unwrap();
    let out = track_step(&s, &mut state, &frame(), None).unwrap();
    assert!((out.bbox.w() - 1.25 * b.w()).abs() < 1e-9);
    assert!((out.bbox.h() - b.h()).abs() < 1e-9);
}

#[test]
fn zero_area_init_is_rejected() {
    let s = Scripted::uniform_boxes(8.0, 8.0, peak_at(4, 4, 0.0), peak_at(4, 4, 0.0));
    assert!(init(&s, &frame(), &BBox::new(10.0, 10.0, 10.0, 30.0), &TrackHyper::default()).is_err());
    assert!(init(&s, &frame(), &BBox::new(300.0, 10.0, 320.0, 30.0), &TrackHyper::default()).is_err());
}

/// Provider that never contributes scores.
struct Silent;

impl OnlineScoreProvider for Silent {
    fn scores(&mut self, _crop: &Tensor, _h: usize, _w: usize) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

/// Provider that always votes for one cell.
struct Vote(usize, usize);

impl OnlineScoreProvider for Vote {
    fn scores(&mut self, _crop: &Tensor, h: usize, w: usize) -> Result<Option<Tensor>> {
        Ok(Some(Tensor::from_fn(&[h, w], |v| if v == self.0 * w + self.1 { 1.0 } else { 0.0 })))
    }
}

fn random_scripted(seed: u64) -> Scripted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reg = Tensor::from_fn(&[4, 9, 9], |_| rng.gen_range(4.0..60.0));
    let p_r = Tensor::from_fn(&[9, 9], |_| rng.gen_range(0.0..1.0));
    let p_o = Tensor::from_fn(&[9, 9], |_| rng.gen_range(0.0..1.0));
    Scripted { reg, p_r, p_o }
}

fn run(s: &dyn Scorer, hyper: TrackHyper, provider: Option<Box<dyn OnlineScoreProvider>>, frames: usize) -> Vec<BBox> {
    let mut t = OceanTracker::new(s, hyper);
    if let Some(p) = provider {
        t = t.with_provider(p);
    }
    t.init(&frame(), start()).unwrap();
    (0..frames).map(|_| t.update(&frame()).unwrap()).collect()
}

#[test]
fn silent_provider_matches_no_provider() {
    let s = random_scripted(3);
    let a = run(&s, TrackHyper::default(), None, 5);
    let b = run(&s, TrackHyper::default(), Some(Box::new(Silent)), 5);
    assert_eq!(a, b);
}

#[test]
fn full_online_weight_follows_the_provider() {
    let s = random_scripted(4);
    let hyper = TrackHyper { omega_online: 1.0, window_weight: 0.0, ..TrackHyper::default() };
    let mut state = init(&s, &frame(), &start(), &hyper).unwrap();
    let out = track_step(&s, &mut state, &frame(), Some(&mut Vote(1, 7))).unwrap();
    assert_eq!(out.cell, (1, 7));
}

#[test]
fn fusion_endpoints_are_exact() {
    let s = random_scripted(5);
    assert_eq!(fuse_scores(&s.p_o, &s.p_r, 1.0).unwrap(), s.p_o);
    assert_eq!(fuse_scores(&s.p_o, &s.p_r, 0.0).unwrap(), s.p_r);
    assert_eq!(fuse_online(None, &s.p_r, 0.3).unwrap(), s.p_r);
    assert_eq!(fuse_online(Some(&s.p_o), &s.p_r, 1.0).unwrap(), s.p_o);
    assert_eq!(fuse_online(Some(&s.p_o), &s.p_r, 0.0).unwrap(), s.p_r);
}

proptest! {
    #[test]
    fn zero_penalty_strength_is_neutral(
        r in 0.01..100.0f64, rp in 0.01..100.0f64, sz in 0.1..500.0f64, sp in 0.1..500.0f64,
    ) {
        for mode in [PenaltyMode::Suppressive, PenaltyMode::Literal] {
            prop_assert_eq!(penalty(r as Real, rp as Real, sz as Real, sp as Real, 0.0, mode).unwrap(), 1.0);
        }
    }

    #[test]
    fn suppressive_penalty_is_at_most_one(
        r in 0.01..100.0f64, rp in 0.01..100.0f64, sz in 0.1..500.0f64, sp in 0.1..500.0f64, k in 0.0..1.0f64,
    ) {
        let p = penalty(r as Real, rp as Real, sz as Real, sp as Real, k as Real, PenaltyMode::Suppressive).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn suppressive_penalty_grows_with_the_change(
        rp in 0.1..10.0f64, sp in 1.0..300.0f64, a in 1.0..4.0f64, extra in 0.0..4.0f64, k in 0.001..1.0f64,
    ) {
        let p = |f: f64| penalty((rp * f) as Real, rp as Real, (sp / f) as Real, sp as Real, k as Real, PenaltyMode::Suppressive).unwrap();
        prop_assert!(p(a + extra) <= p(a));
        prop_assert!(p(1.0) == 1.0);
    }

    #[test]
    fn selection_ignores_positive_score_scaling(seed in any::<u64>(), c in 0.01..100.0f64) {
        // Scaling both classifier maps scales every final score by the same
        // positive factor, so the chosen cell and box cannot change.
        let s = random_scripted(seed);
        let scaled = s.scaled(c as Real);
        let hyper = TrackHyper::default();
        let mut a = init(&s, &frame(), &start(), &hyper).unwrap();
        let mut b = init(&scaled, &frame(), &start(), &hyper).unwrap();
        let oa = track_step(&s, &mut a, &frame(), None).unwrap();
        let ob = track_step(&scaled, &mut b, &frame(), None).unwrap();
        prop_assert_eq!(oa.cell, ob.cell);
        prop_assert_eq!(oa.bbox, ob.bbox);
    }

    #[test]
    fn boxes_stay_in_frame_and_above_min_size(seed in any::<u64>()) {
        let hyper = TrackHyper::default();
        for b in run(&random_scripted(seed), hyper.clone(), None, 8) {
            prop_assert!(b.cx() >= 0.0 && b.cx() <= 240.0 && b.cy() >= 0.0 && b.cy() <= 200.0);
            prop_assert!(b.w() >= hyper.min_size - 1e-9 && b.w() <= 240.0 + 1e-9);
            prop_assert!(b.h() >= hyper.min_size - 1e-9 && b.h() <= 200.0 + 1e-9);
        }
    }
}
