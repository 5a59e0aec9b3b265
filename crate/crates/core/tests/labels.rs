//! Target generation against brute-force definitions.

use ocean_core::geometry::{BBox, GridSpec};
use ocean_core::labels::{classification_labels_regular, decode_boxes, objectaware_labels, regression_targets, LabelBundle};
use ocean_core::{Real, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(rng: &mut ChaCha8Rng) -> GridSpec {
    let stride = [4.0, 8.0, 6.5][rng.gen_range(0..3)];
    GridSpec::new(rng.gen_range(1..14), rng.gen_range(1..14), stride, rng.gen_range(0.0..40.0))
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x0, y0) = (rng.gen_range(-20.0..100.0), rng.gen_range(-20.0..100.0));
    BBox::new(x0, y0, x0 + rng.gen_range(1.0..90.0), y0 + rng.gen_range(1.0..90.0))
}

fn cell_xy(g: &GridSpec, i: usize, j: usize) -> (Real, Real) {
    (g.offset + g.stride * j as Real, g.offset + g.stride * i as Real)
}

fn inside(b: &BBox, x: Real, y: Real) -> bool {
    b.x0 <= x && x <= b.x1 && b.y0 <= y && y <= b.y1
}

fn overlap(a: &BBox, b: &BBox) -> Real {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[test]
fn regression_targets_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (g, b) = (random_grid(&mut rng), random_box(&mut rng));
        let (t, m) = regression_targets(&b, &g).unwrap();
        for i in 0..g.height {
            for j in 0..g.width {
                let (x, y) = cell_xy(&g, i, j);
                let hit = inside(&b, x, y);
                assert_eq!(m.at2(i, j), if hit { 1.0 } else { 0.0 });
                let want = if hit { [x - b.x0, y - b.y0, b.x1 - x, b.y1 - y] } else { [0.0; 4] };
                for (c, w) in want.iter().enumerate() {
                    assert_eq!(t.at3(c, i, j), *w);
                }
            }
        }
    }
}

#[test]
fn regular_labels_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (g, b) = (random_grid(&mut rng), random_box(&mut rng));
        let r = rng.gen_range(2.0..30.0);
        let l = classification_labels_regular(&b, &g, r).unwrap();
        let (cx, cy) = ((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0);
        for i in 0..g.height {
            for j in 0..g.width {
                let (x, y) = cell_xy(&g, i, j);
                let want = (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
                assert_eq!(l.at2(i, j), if want { 1.0 } else { 0.0 });
            }
        }
        // The bundle restricts positives to the box and makes the rest negative.
        let bundle = LabelBundle::build(&b, &g, r).unwrap();
        for v in 0..g.cells() {
            let pos = l.data()[v] * bundle.reg_mask.data()[v];
            assert_eq!(bundle.cls_regular.data()[v], pos);
            assert_eq!(bundle.cls_neg_mask.data()[v], 1.0 - pos);
        }
    }
}

#[test]
fn objectaware_labels_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (g, gt) = (random_grid(&mut rng), random_box(&mut rng));
        let (_, mask) = regression_targets(&gt, &g).unwrap();
        let plane = g.cells();
        let mut boxes = Tensor::zeros(&[4, g.height, g.width]);
        let mut want = vec![0.0; plane];
        for v in 0..plane {
            let b = if rng.gen_bool(0.1) { BBox::new(5.0, 5.0, 5.0, 9.0) } else { random_box(&mut rng) };
            for (c, x) in [b.x0, b.y0, b.x1, b.y1].into_iter().enumerate() {
                boxes.data_mut()[c * plane + v] = x;
            }
            if mask.data()[v] == 1.0 {
                want[v] = overlap(&b, &gt);
            }
        }
        let got = objectaware_labels(&boxes, &gt, &mask).unwrap();
        for v in 0..plane {
            assert_eq!(got.data()[v], want[v]);
        }
    }
}

#[test]
fn decode_inverts_encode_inside_the_box() {
    // Dyadic coordinates keep every subtraction and addition exact.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dyadic = |rng: &mut ChaCha8Rng, lo: i32, hi: i32| rng.gen_range(lo * 8..hi * 8) as Real / 8.0;
    for _ in 0..100 {
        let g = GridSpec::new(rng.gen_range(2..12), rng.gen_range(2..12), 8.0, dyadic(&mut rng, 0, 40));
        let (x0, y0) = (dyadic(&mut rng, -10, 80), dyadic(&mut rng, -10, 80));
        let gt = BBox::new(x0, y0, x0 + dyadic(&mut rng, 1, 90), y0 + dyadic(&mut rng, 1, 90));
        let (t, m) = regression_targets(&gt, &g).unwrap();
        let dec = decode_boxes(&t, &g).unwrap();
        let plane = g.cells();
        for v in (0..plane).filter(|&v| m.data()[v] == 1.0) {
            let got: Vec<Real> = (0..4).map(|c| dec.data()[c * plane + v]).collect();
            assert_eq!(got, vec![gt.x0, gt.y0, gt.x1, gt.y1]);
        }
    }
}

proptest! {
    #[test]
    fn labels_follow_grid_translations(
        h in 3usize..10, w in 3usize..10,
        di in 0usize..3, dj in 0usize..3,
        x0 in 0.0..40.0f64, y0 in 0.0..40.0f64,
        bw in 4.0..40.0f64, bh in 4.0..40.0f64,
        r in 4.0..20.0f64,
    ) {
        // Shifting the box by whole cells shifts every label map by the same cells.
        let stride = 8.0;
        let g = GridSpec::new(h + 3, w + 3, stride, 4.0);
        let b = BBox::new(x0 as Real, y0 as Real, (x0 + bw) as Real, (y0 + bh) as Real);
        let moved = b.translate(dj as Real * stride, di as Real * stride);
        let (t0, m0) = regression_targets(&b, &g).unwrap();
        let (t1, m1) = regression_targets(&moved, &g).unwrap();
        let l0 = classification_labels_regular(&b, &g, r as Real).unwrap();
        let l1 = classification_labels_regular(&moved, &g, r as Real).unwrap();
        for i in 0..h {
            for j in 0..w {
                prop_assert_eq!(m0.at2(i, j), m1.at2(i + di, j + dj));
                prop_assert_eq!(l0.at2(i, j), l1.at2(i + di, j + dj));
                for c in 0..4 {
                    prop_assert!((t0.at3(c, i, j) - t1.at3(c, i + di, j + dj)).abs() < 1e-9);
                }
            }
        }
    }
}
