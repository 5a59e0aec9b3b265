//! Pair sampling and the SGD training loop.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Reduction};
use crate::error::{Error, Result};
use crate::geometry::{BBox, GridSpec};
use crate::harness::synth::{FrameSource, Scene, SyntheticSceneConfig};
use crate::image::crop_resize;
use crate::labels::{decode_boxes, objectaware_labels, LabelBundle};
use crate::loss::LossWeights;
use crate::network::{forward_pair, preprocess, BoundParams, ModelParams, NetConfig};
use crate::tensor::{Real, Tensor};
use crate::tracker::{context_size, CropWindow};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    /// Learning rate while the backbone is frozen.
    pub warmup_lr: Real,
    /// First learning rate after warmup, decayed exponentially to `final_lr`.
    pub peak_lr: Real,
    pub final_lr: Real,
    pub momentum: Real,
    pub weight_decay: Real,
    pub freeze_backbone_epochs: usize,
    /// Largest frame distance between exemplar and search frames.
    pub max_frame_gap: usize,
    /// Largest search-crop displacement of the target, in crop pixels.
    pub shift_jitter: Real,
    /// Search-crop scale factor is `exp(u)` with `|u| <= scale_jitter`.
    pub scale_jitter: Real,
    /// Radius of regular classification positives, in crop pixels.
    pub label_radius: Real,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            pairs_per_epoch: 2000,
            batch_size: 16,
            warmup_lr: 1e-3,
            peak_lr: 5e-3,
            final_lr: 1e-5,
            momentum: 0.9,
            weight_decay: 1e-3,
            freeze_backbone_epochs: 1,
            max_frame_gap: 30,
            shift_jitter: 24.0,
            scale_jitter: 0.15,
            label_radius: 16.0,
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.pairs_per_epoch == 0 || self.batch_size == 0 {
            return bad(alloc::format!(
                "epochs, pairs_per_epoch and batch_size must be positive, got {}, {}, {}",
                self.epochs, self.pairs_per_epoch, self.batch_size
            ));
        }
        for (name, v) in [("warmup_lr", self.warmup_lr), ("peak_lr", self.peak_lr), ("final_lr", self.final_lr)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(alloc::format!("{} must be finite and >= 0, got {}", name, v));
            }
        }
        if self.final_lr > self.peak_lr {
            return bad(alloc::format!("final_lr {} exceeds peak_lr {}", self.final_lr, self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(alloc::format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(alloc::format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.label_radius > 0.0) || !(self.shift_jitter >= 0.0) || !(self.scale_jitter >= 0.0) {
            return bad("label_radius must be positive and jitters nonnegative".into());
        }
        self.loss_weights.validate().map_err(|e| Error::Config(alloc::format!("{}", e)))
    }

    /// Learning rate of an epoch: constant warmup while the backbone is
    /// frozen, then exponential decay from `peak_lr` to `final_lr`.
    pub fn learning_rate(&self, epoch: usize) -> Real {
        let warm = self.freeze_backbone_epochs.min(self.epochs);
        if epoch < warm {
            return self.warmup_lr;
        }
        let span = self.epochs - warm;
        if span <= 1 || self.peak_lr == 0.0 {
            return self.peak_lr;
        }
        let t = (epoch - warm) as Real / (span - 1) as Real;
        self.peak_lr * (self.final_lr / self.peak_lr).powf(t)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pairs_per_epoch.div_ceil(self.batch_size)
    }
}

/// Exemplar crop, search crop (pixel values in `[0, 1]`) and the target
/// box in search-crop pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub exemplar: Tensor,
    pub search: Tensor,
    pub gt: BBox,
}

/// Crops a training pair from two frames of one scene.
pub fn make_pair(
    scene: &Scene,
    t_exemplar: usize,
    t_search: usize,
    shift: (Real, Real),
    scale: Real,
    net: &NetConfig,
) -> Result<TrainingPair> {
    let boxes = scene.groundtruth();
    let (ze, zs) = (boxes[t_exemplar], boxes[t_search]);
    let fe = scene.render(t_exemplar)?;
    let s_z = context_size(ze.w(), ze.h());
    let exemplar = crop_resize(&fe, ze.cx(), ze.cy(), s_z, net.exemplar_size)?;

    let fs = scene.render(t_search)?;
    let s_x = context_size(zs.w(), zs.h()) * scale * net.search_size as Real / net.exemplar_size as Real;
    let k = s_x / net.search_size as Real;
    // Moving the crop centre by -shift puts the target `shift` crop pixels off-centre.
    let (cx, cy) = (zs.cx() - shift.0 * k, zs.cy() - shift.1 * k);
    let search = crop_resize(&fs, cx, cy, s_x, net.search_size)?;
    let window = CropWindow::new(cx, cy, s_x, net.search_size);
    Ok(TrainingPair { exemplar, search, gt: window.to_crop(&zs) })
}

/// Draws a random pair from the synthetic training distribution.
pub fn sample_pair(rng: &mut ChaCha8Rng, cfg: &TrainConfig, net: &NetConfig) -> Result<TrainingPair> {
    let scene_cfg = SyntheticSceneConfig::training(rng.gen());
    let scene = Scene::new(&scene_cfg)?;
    let n = scene_cfg.num_frames;
    let t1 = rng.gen_range(0..n);
    let lo = t1.saturating_sub(cfg.max_frame_gap);
    let hi = (t1 + cfg.max_frame_gap).min(n - 1);
    let t2 = rng.gen_range(lo..=hi);
    let j = cfg.shift_jitter;
    let shift = if j > 0.0 { (rng.gen_range(-j..=j), rng.gen_range(-j..=j)) } else { (0.0, 0.0) };
    let u = if cfg.scale_jitter > 0.0 { rng.gen_range(-cfg.scale_jitter..=cfg.scale_jitter) } else { 0.0 };
    make_pair(&scene, t1, t2, shift, u.exp(), net)
}

/// Loss values of one step (batch means).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: Real,
    pub l_reg: Real,
    pub l_o: Real,
    pub l_r: Real,
    pub total: Real,
}

/// Loss nodes of one pair. The regression and object-aware terms are
/// absent when no score cell falls inside the groundtruth box.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub l_reg: Option<NodeId>,
    pub l_o: Option<NodeId>,
    pub l_r: NodeId,
}

/// Object-aware targets: IoU of each in-box cell's decoded box with the groundtruth.
pub fn objectaware_targets(reg: &Tensor, gt: &BBox, grid: &GridSpec, reg_mask: &Tensor) -> Result<Tensor> {
    let boxes = decode_boxes(reg, grid)?;
    objectaware_labels(&boxes, gt, reg_mask)
}

/// Builds `l_reg + lambda1 * l_o + lambda2 * l_r` for one pair. Object-aware
/// targets are taken from `oa_labels` when given, otherwise computed from
/// the current regression output (and treated as constants).
pub fn build_loss(
    g: &mut Graph,
    p: &BoundParams,
    net: &NetConfig,
    pair: &TrainingPair,
    label_radius: Real,
    weights: &LossWeights,
    oa_labels: Option<Tensor>,
) -> Result<LossNodes> {
    let z = g.constant(preprocess(&pair.exemplar));
    let x = g.constant(preprocess(&pair.search));
    let out = forward_pair(g, p, net, z, x)?;
    let grid = net.grid();
    let labels = LabelBundle::build(&pair.gt, &grid, label_radius)?;
    let l_r = g.bce(out.p_r, labels.cls_regular.clone(), labels.cls_regular, labels.cls_neg_mask)?;
    let mut total = g.scale(l_r, weights.lambda2)?;
    if labels.reg_mask.sum() == 0.0 {
        return Ok(LossNodes { total, l_reg: None, l_o: None, l_r });
    }
    let l_reg = g.iou_loss(out.reg, labels.reg_targets, labels.reg_mask.clone(), Reduction::Mean)?;
    let oa = match oa_labels {
        Some(t) => t,
        None => objectaware_targets(g.value(out.reg), &pair.gt, &grid, &labels.reg_mask)?,
    };
    let neg = Tensor::zeros(labels.reg_mask.shape());
    let l_o = g.bce(out.p_o, oa, labels.reg_mask, neg)?;
    let wo = g.scale(l_o, weights.lambda1)?;
    total = g.add(total, l_reg)?;
    total = g.add(total, wo)?;
    Ok(LossNodes { total, l_reg: Some(l_reg), l_o: Some(l_o), l_r })
}

/// Parameters plus SGD momentum buffers.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: NetConfig,
    pub params: ModelParams,
    velocity: BTreeMap<String, Tensor>,
    pub momentum: Real,
    pub weight_decay: Real,
    pub loss_weights: LossWeights,
    pub label_radius: Real,
    step: usize,
}

pub fn is_backbone(name: &str) -> bool {
    name.starts_with("backbone.")
}

impl Trainer {
    pub fn new(net: NetConfig, params: ModelParams, cfg: &TrainConfig) -> Result<Self> {
        net.validate()?;
        params.check_against(&net)?;
        let velocity = params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        Ok(Self {
            net,
            params,
            velocity,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            loss_weights: cfg.loss_weights,
            label_radius: cfg.label_radius,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Loss components and parameter gradients for one pair.
    fn pair_gradients(&self, pair: &TrainingPair, freeze_backbone: bool) -> Result<([Real; 4], Vec<(String, Tensor)>)> {
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &self.params, |n| !(freeze_backbone && is_backbone(n)));
        let nodes = build_loss(&mut g, &p, &self.net, pair, self.label_radius, &self.loss_weights, None)?;
        let val = |g: &Graph, id: Option<NodeId>| id.map_or(Ok(0.0), |id| g.value(id).item());
        let vals = [val(&g, nodes.l_reg)?, val(&g, nodes.l_o)?, val(&g, Some(nodes.l_r))?, val(&g, Some(nodes.total))?];
        if !vals[3].is_finite() {
            return Err(Error::Numeric(alloc::format!("loss became {}", vals[3])));
        }
        g.backward(nodes.total)?;
        let grads = p
            .iter()
            .filter_map(|(name, id)| g.grad(*id).map(|gr| (name.clone(), gr.clone())))
            .collect();
        Ok((vals, grads))
    }

    /// One SGD step with momentum and weight decay on the batch mean loss.
    pub fn step(&mut self, batch: &[TrainingPair], lr: Real, freeze_backbone: bool) -> Result<LossRecord> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let inv = 1.0 / batch.len() as Real;
        let mut sums = [0.0; 4];
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        for pair in batch {
            let (vals, grads) = self.pair_gradients(pair, freeze_backbone)?;
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v * inv;
            }
            for (name, gr) in grads {
                match acc.get_mut(&name) {
                    Some(a) => a.axpy(inv, &gr)?,
                    None => {
                        acc.insert(name, gr.map(|v| v * inv));
                    }
                }
            }
        }
        for (name, grad) in &acc {
            if !grad.is_finite() {
                return Err(Error::Numeric(alloc::format!("non-finite gradient for {}", name)));
            }
        }
        if lr != 0.0 {
            for (name, grad) in acc {
                let param = self.params.get_mut(&name).expect("gradient names come from the parameter set");
                let vel = self.velocity.get_mut(&name).expect("velocity mirrors parameters");
                let (mu, wd) = (self.momentum, self.weight_decay);
                for ((v, g), p) in vel.data_mut().iter_mut().zip(grad.data()).zip(param.data_mut()) {
                    *v = mu * *v + g + wd * *p;
                    *p -= lr * *v;
                }
            }
        }
        self.step += 1;
        let [l_reg, l_o, l_r, total] = sums;
        Ok(LossRecord { step: self.step, lr, l_reg, l_o, l_r, total })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<LossRecord>,
}

/// Training stopped early; `last_good` holds the parameters before the failing step.
#[derive(Debug, Clone)]
pub struct TrainAbort {
    pub error: Error,
    pub last_good: ModelParams,
    pub history: Vec<LossRecord>,
}

/// Trains from seeded initial parameters.
pub fn train(cfg: &TrainConfig, net: &NetConfig) -> core::result::Result<TrainOutcome, TrainAbort> {
    train_with(cfg, net, &mut |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with(
    cfg: &TrainConfig,
    net: &NetConfig,
    on_step: &mut dyn FnMut(&LossRecord),
) -> core::result::Result<TrainOutcome, TrainAbort> {
    let params = match ModelParams::init(net, cfg.seed) {
        Ok(p) => p,
        Err(error) => return Err(TrainAbort { error, last_good: ModelParams::from_map(BTreeMap::new()), history: Vec::new() }),
    };
    train_from(cfg, net, params, on_step)
}

pub fn train_from(
    cfg: &TrainConfig,
    net: &NetConfig,
    params: ModelParams,
    on_step: &mut dyn FnMut(&LossRecord),
) -> core::result::Result<TrainOutcome, TrainAbort> {
    let abort = |error: Error, last_good: ModelParams, history: Vec<LossRecord>| TrainAbort { error, last_good, history };
    if let Err(e) = cfg.validate() {
        return Err(abort(e, params, Vec::new()));
    }
    let mut trainer = match Trainer::new(net.clone(), params.clone(), cfg) {
        Ok(t) => t,
        Err(e) => return Err(abort(e, params, Vec::new())),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut history = Vec::with_capacity(cfg.epochs * cfg.steps_per_epoch());
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let freeze = epoch < cfg.freeze_backbone_epochs;
        let mut remaining = cfg.pairs_per_epoch;
        while remaining > 0 {
            let n = remaining.min(cfg.batch_size);
            remaining -= n;
            let batch = match (0..n).map(|_| sample_pair(&mut rng, cfg, net)).collect::<Result<Vec<_>>>() {
                Ok(b) => b,
                Err(e) => return Err(abort(e, trainer.params, history)),
            };
            let before = trainer.params.clone();
            match trainer.step(&batch, lr, freeze) {
                Ok(rec) => {
                    on_step(&rec);
                    history.push(rec);
                }
                Err(e) => return Err(abort(e, before, history)),
            }
            if let Some((name, _)) = trainer.params.iter().find(|(_, t)| !t.is_finite()) {
                let e = Error::Numeric(alloc::format!("parameter {} diverged", name));
                return Err(abort(e, before, history));
            }
        }
    }
    Ok(TrainOutcome { params: trainer.params, history })
}

/// `steps` full-network SGD steps at `cfg.peak_lr` on one pair drawn with
/// `cfg.seed`, starting from parameters seeded the same way.
pub fn overfit_single_pair(cfg: &TrainConfig, net: &NetConfig, steps: usize) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0ef1_7000);
    let pair = sample_pair(&mut rng, cfg, net)?;
    let mut trainer = Trainer::new(net.clone(), ModelParams::init(net, cfg.seed)?, cfg)?;
    let batch = [pair];
    (0..steps).map(|_| trainer.step(&batch, cfg.peak_lr, false)).collect()
}
