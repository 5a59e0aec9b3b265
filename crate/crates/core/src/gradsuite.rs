//! The standard gradient-check suite: every graph op on random inputs and
//! the full training loss of a tiny network.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{boxes_to_grid_units, compute_offsets, OffsetField};
use crate::autodiff::{Graph, NodeId, Reduction};
use crate::error::Result;
use crate::geometry::{BBox, GridSpec};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::harness::train::{build_loss, objectaware_targets, TrainingPair};
use crate::labels::{decode_boxes, regression_targets};
use crate::loss::LossWeights;
use crate::network::{forward_pair, preprocess, BoundParams, ModelParams, NetConfig};
use crate::ops::ConvGeometry;
use crate::tensor::{Real, Tensor};

/// Tolerance for single ops.
pub const OP_TOL: Real = 1e-4;
/// Tolerance for the composite loss.
pub const END_TO_END_TOL: Real = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
fn project(g: &mut Graph, y: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let r = uniform(rng, g.value(y).shape(), -1.0, 1.0);
    let r = g.constant(r);
    let m = g.mul(y, r)?;
    g.sum(m)
}

/// Random 0/1 mask with at least one set element.
fn mask(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor {
    let mut m = Tensor::from_fn(shape, |_| if rng.gen_bool(p) { 1.0 } else { 0.0 });
    if m.sum() == 0.0 {
        m.data_mut()[0] = 1.0;
    }
    m
}

fn check<F>(out: &mut Vec<(String, GradCheckReport)>, name: &str, build: F, params: &[(&str, Tensor)]) -> Result<()>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    out.push((name.to_string(), grad_check(build, params, OP_TOL)?));
    Ok(())
}

/// Finite-difference checks of every differentiable op, seeded.
pub fn op_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let r = rng.gen::<u64>();
    let proj = move |g: &mut Graph, y: NodeId| project(g, y, &mut ChaCha8Rng::seed_from_u64(r));

    let geoms = [
        ("conv2d", ConvGeometry::new((1, 1), (1, 1))),
        ("conv2d_dilated", ConvGeometry::new((1, 2), (1, 2))),
        ("conv2d_strided", ConvGeometry::new((1, 1), (1, 1)).with_stride((2, 2))),
        ("conv2d_valid", ConvGeometry::new((2, 1), (0, 0))),
    ];
    for (name, geom) in geoms {
        let x = uniform(&mut rng, &[3, 7, 6], -1.0, 1.0);
        let w = uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        check(&mut out, name, |g, p| { let y = g.conv2d(p[0], p[1], geom)?; proj(g, y) }, &[("input", x), ("weight", w)])?;
    }

    let x = uniform(&mut rng, &[3, 4, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[3], -1.0, 1.0);
    check(&mut out, "channel_bias", |g, p| { let y = g.channel_bias(p[0], p[1])?; proj(g, y) }, &[("input", x), ("bias", b)])?;

    let s = uniform(&mut rng, &[3, 7, 7], -1.0, 1.0);
    let k = uniform(&mut rng, &[3, 3, 3], -1.0, 1.0);
    check(&mut out, "depthwise_xcorr", |g, p| { let y = g.depthwise_xcorr(p[0], p[1])?; proj(g, y) }, &[("search", s), ("kernel", k)])?;

    let x = uniform(&mut rng, &[3, 5, 5], -1.0, 1.0);
    let w = uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let field = OffsetField { k: 3, offsets: uniform(&mut rng, &[18, 5, 5], -1.5, 1.5) };
    check(
        &mut out,
        "aligned_conv",
        |g, p| { let y = g.aligned_conv(p[0], p[1], field.clone())?; proj(g, y) },
        &[("input", x), ("weight", w)],
    )?;

    // Offsets driven by regression distances, with the offset gradient path.
    let grid = GridSpec::new(5, 5, 8.0, 8.0);
    let x = uniform(&mut rng, &[3, 5, 5], -1.0, 1.0);
    let w = uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let d = uniform(&mut rng, &[4, 5, 5], 4.0, 14.0);
    check(
        &mut out,
        "aligned_conv_coupled",
        |g, p| {
            let boxes = decode_boxes(g.value(p[2]), &grid)?;
            let field = compute_offsets(&boxes_to_grid_units(&boxes, &grid)?, 3)?;
            let y = g.aligned_conv_coupled(p[0], p[1], field, p[2], grid.stride)?;
            proj(g, y)
        },
        &[("input", x), ("weight", w), ("distances", d)],
    )?;

    let x = || uniform(&mut ChaCha8Rng::seed_from_u64(r ^ 1), &[2, 3, 4], -1.0, 1.0);
    check(&mut out, "relu", |g, p| { let y = g.relu(p[0]); proj(g, y) }, &[("x", x())])?;
    check(&mut out, "sigmoid", |g, p| { let y = g.sigmoid(p[0]); proj(g, y) }, &[("x", x())])?;
    check(&mut out, "exp", |g, p| { let y = g.exp(p[0])?; proj(g, y) }, &[("x", x())])?;
    check(&mut out, "clamp", |g, p| { let y = g.clamp(p[0], -0.5, 0.5); proj(g, y) }, &[("x", x())])?;
    check(&mut out, "scale", |g, p| { let y = g.scale(p[0], -1.7)?; proj(g, y) }, &[("x", x())])?;
    check(&mut out, "reshape", |g, p| { let y = g.reshape(p[0], &[6, 4])?; proj(g, y) }, &[("x", x())])?;
    check(&mut out, "sum", |g, p| g.sum(p[0]), &[("x", x())])?;
    check(&mut out, "mean", |g, p| g.mean(p[0]), &[("x", x())])?;
    let y = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
    check(&mut out, "add", |g, p| { let s = g.add(p[0], p[1])?; proj(g, s) }, &[("a", x()), ("b", y.clone())])?;
    check(&mut out, "mul", |g, p| { let s = g.mul(p[0], p[1])?; proj(g, s) }, &[("a", x()), ("b", y)])?;

    let pred = uniform(&mut rng, &[4, 3, 3], 1.0, 10.0);
    let targets = uniform(&mut rng, &[4, 3, 3], 1.0, 10.0);
    let m = mask(&mut rng, &[3, 3], 0.6);
    for (name, red) in [("iou_loss_mean", Reduction::Mean), ("iou_loss_sum", Reduction::Sum)] {
        let (t, mk) = (targets.clone(), m.clone());
        check(&mut out, name, move |g, p| g.iou_loss(p[0], t.clone(), mk.clone(), red), &[("pred", pred.clone())])?;
    }

    let prob = uniform(&mut rng, &[4, 4], 0.05, 0.95);
    let labels = uniform(&mut rng, &[4, 4], 0.0, 1.0);
    let pos = mask(&mut rng, &[4, 4], 0.4);
    let neg = Tensor::from_fn(&[4, 4], |i| if pos.data()[i] == 0.0 && i % 3 != 0 { 1.0 } else { 0.0 });
    check(&mut out, "bce", |g, p| g.bce(p[0], labels.clone(), pos.clone(), neg.clone()), &[("prob", prob)])?;
    Ok(out)
}

/// Smallest network that still exercises every layer type.
pub fn tiny_net() -> NetConfig {
    NetConfig {
        exemplar_size: 40,
        search_size: 64,
        backbone_channels: [2, 3, 3, 3],
        combined_channels: 3,
        head_channels: 3,
        tower_depth: 1,
        couple_offsets: true,
        ..NetConfig::default()
    }
}

/// The composite-loss problem of [`end_to_end_check`]: a tiny network at a
/// jittered seeded initialization and one random pair. Object-aware targets
/// are fixed from the initial forward pass, since the analytic gradient
/// treats them as constants.
#[derive(Debug, Clone)]
pub struct EndToEndProblem {
    pub net: NetConfig,
    pub params: ModelParams,
    pub pair: TrainingPair,
    pub oa_labels: Tensor,
    pub radius: Real,
    pub weights: LossWeights,
}

impl EndToEndProblem {
    pub fn new(seed: u64) -> Result<Self> {
        let net = tiny_net();
        let mut params = ModelParams::init(&net, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
        // Zero biases put pre-activations over all-zero inputs exactly on the
        // ReLU kink; jitter every parameter to check at a generic point.
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let pair = TrainingPair {
            exemplar: uniform(&mut rng, &[3, 40, 40], 0.0, 1.0),
            search: uniform(&mut rng, &[3, 64, 64], 0.0, 1.0),
            gt: BBox::new(rng.gen_range(14.0..26.0), rng.gen_range(14.0..26.0), rng.gen_range(38.0..50.0), rng.gen_range(38.0..50.0)),
        };
        let grid = net.grid();
        let oa_labels = {
            let mut g = Graph::new();
            let p = BoundParams::bind(&mut g, &params, |_| false);
            let z = g.constant(preprocess(&pair.exemplar));
            let x = g.constant(preprocess(&pair.search));
            let out = forward_pair(&mut g, &p, &net, z, x)?;
            let (_, m) = regression_targets(&pair.gt, &grid)?;
            objectaware_targets(g.value(out.reg), &pair.gt, &grid, &m)?
        };
        Ok(Self { net, params, pair, oa_labels, radius: 12.0, weights: LossWeights::default() })
    }

    /// Parameters in name order, as passed to [`grad_check`].
    pub fn param_list(&self) -> Vec<(&str, Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t.clone())).collect()
    }

    /// Total loss with parameters bound to `ids` in [`Self::param_list`] order.
    pub fn loss(&self, g: &mut Graph, ids: &[NodeId]) -> Result<NodeId> {
        let p = BoundParams::from_ids(self.params.iter().map(|(n, _)| n.clone()).zip(ids.iter().copied()));
        Ok(build_loss(g, &p, &self.net, &self.pair, self.radius, &self.weights, Some(self.oa_labels.clone()))?.total)
    }
}

/// Finite-difference check of the full weighted loss with respect to all
/// parameters of [`tiny_net`].
pub fn end_to_end_check(seed: u64) -> Result<GradCheckReport> {
    let problem = EndToEndProblem::new(seed)?;
    grad_check(|g, ids| problem.loss(g, ids), &problem.param_list(), END_TO_END_TOL)
}
