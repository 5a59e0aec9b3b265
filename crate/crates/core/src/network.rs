//! Siamese network: a small stride-8 backbone, three-branch dilated feature
//! combination, the anchor-free regression head and the regular and
//! object-aware classification heads.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{boxes_to_grid_units, compute_offsets};
use crate::autodiff::{Graph, NodeId};
use crate::error::{shape_err, Error, Result};
use crate::geometry::GridSpec;
use crate::labels::decode_boxes;
use crate::ops::ConvGeometry;
use crate::tensor::{Real, Tensor};

/// Architecture and input geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub exemplar_size: usize,
    pub search_size: usize,
    /// Output channels of the four backbone stages. The first three halve
    /// the resolution; the last keeps it and dilates by 2.
    pub backbone_channels: [usize; 4],
    /// Channels after the combination convolutions.
    pub combined_channels: usize,
    pub head_channels: usize,
    pub tower_depth: usize,
    /// Combination branches as `(a, b)`: dilation `a` along X, `b` along Y.
    pub branch_dilations: Vec<(usize, usize)>,
    /// Kernel of the object-aware aligned convolution.
    pub align_kernel: usize,
    /// Raw regression outputs are clamped to `[-reg_clamp, reg_clamp]`
    /// before the exponential.
    pub reg_clamp: Real,
    /// Let classification gradients reach the regression branch through
    /// the sampling offsets.
    pub couple_offsets: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            exemplar_size: 64,
            search_size: 128,
            backbone_channels: [16, 32, 32, 32],
            combined_channels: 32,
            head_channels: 32,
            tower_depth: 4,
            branch_dilations: alloc::vec![(1, 1), (1, 2), (2, 1)],
            align_kernel: 3,
            reg_clamp: 10.0,
            couple_offsets: false,
        }
    }
}

/// Total stride of the backbone.
pub const STRIDE: usize = 8;

impl NetConfig {
    /// Full-size shapes: 127/255 inputs and 256 combined channels.
    pub fn full_scale() -> Self {
        Self {
            exemplar_size: 127,
            search_size: 255,
            backbone_channels: [64, 256, 512, 1024],
            combined_channels: 256,
            head_channels: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.exemplar_size < 2 * STRIDE || self.search_size <= self.exemplar_size {
            return bad(format!(
                "need search_size > exemplar_size >= {}, got {} / {}",
                2 * STRIDE,
                self.search_size,
                self.exemplar_size
            ));
        }
        if self.backbone_channels.iter().any(|&c| c == 0) || self.combined_channels == 0 || self.head_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.branch_dilations.is_empty() || self.branch_dilations.iter().any(|&(a, b)| a == 0 || b == 0) {
            return bad("need at least one branch with dilations >= 1".into());
        }
        if self.align_kernel % 2 == 0 {
            return bad(format!("align_kernel must be odd, got {}", self.align_kernel));
        }
        if self.tower_depth == 0 {
            return bad("tower_depth must be >= 1".into());
        }
        if !(self.reg_clamp > 0.0) {
            return bad("reg_clamp must be positive".into());
        }
        let (fe, fs) = (self.feature_size(self.exemplar_size), self.feature_size(self.search_size));
        for &(a, b) in &self.branch_dilations {
            if fe < 2 * a.max(b) + 1 {
                return bad(format!("exemplar feature {} too small for dilation ({}, {})", fe, a, b));
            }
        }
        if fs <= fe {
            return bad("search feature must be larger than exemplar feature".into());
        }
        Ok(())
    }

    /// Backbone output side for an input side of `size` pixels.
    pub fn feature_size(&self, size: usize) -> usize {
        let mut s = size;
        for _ in 0..3 {
            s = (s - 1) / 2 + 1;
        }
        s
    }

    /// Side of the score map.
    pub fn score_size(&self) -> usize {
        self.feature_size(self.search_size) - self.feature_size(self.exemplar_size) + 1
    }

    /// Score-map grid, centred in the search crop.
    pub fn grid(&self) -> GridSpec {
        GridSpec::centered(self.score_size(), STRIDE as Real, self.search_size as Real)
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            out.push((format!("{}.weight", name), alloc::vec![cout, cin, k, k]));
            out.push((format!("{}.bias", name), alloc::vec![cout]));
        };
        let mut cin = 3;
        for (s, &c) in self.backbone_channels.iter().enumerate() {
            conv(format!("backbone.{}", s), c, cin, 3);
            cin = c;
        }
        for &(a, b) in &self.branch_dilations {
            conv(format!("combine.d{}{}.exemplar", a, b), self.combined_channels, cin, 3);
            conv(format!("combine.d{}{}.search", a, b), self.combined_channels, cin, 3);
        }
        for tower in ["reg", "cls"] {
            let mut c = self.combined_channels;
            for i in 0..self.tower_depth {
                conv(format!("{}.tower.{}", tower, i), self.head_channels, c, 3);
                c = self.head_channels;
            }
            conv(format!("{}.out", tower), if tower == "reg" { 4 } else { 1 }, c, 3);
        }
        conv("oa".into(), 1, self.combined_channels, self.align_kernel);
        out
    }
}

/// Named parameter tensors. Names are unique; iteration is in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

/// Initial bias of both classification outputs (sigmoid(-2) ~ 0.12).
pub const CLS_BIAS_INIT: Real = -2.0;

impl ModelParams {
    /// Centred uniform fan-in initialisation, `U(-g*sqrt(3/fan_in), +)`.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.param_shapes() {
            let t = if name.ends_with(".bias") {
                let v = if name == "cls.out.bias" || name == "oa.bias" { CLS_BIAS_INIT } else { 0.0 };
                Tensor::full(&shape, v)
            } else {
                let fan_in = (shape[1] * shape[2] * shape[3]) as Real;
                let gain: Real = if name.starts_with("combine.") || name.ends_with(".out.weight") || name == "oa.weight" {
                    0.5
                } else {
                    (2.0 as Real).sqrt()
                };
                let bound = gain * (3.0 / fan_in).sqrt();
                Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Checks that names and shapes agree with `cfg` exactly.
    pub fn check_against(&self, cfg: &NetConfig) -> Result<()> {
        let expected = cfg.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(shape_err!("expected {} parameters, found {}", expected.len(), self.tensors.len()));
        }
        for (name, shape) in expected {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(shape_err!("{} has shape {:?}, expected {:?}", name, t.shape(), shape)),
                None => return Err(shape_err!("missing parameter {}", name)),
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// Parameters bound into a graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    /// Binds every parameter; those for which `trainable` holds become
    /// gradient leaves, the rest constants.
    pub fn bind(g: &mut Graph, params: &ModelParams, trainable: impl Fn(&str) -> bool) -> Self {
        let ids = params
            .iter()
            .map(|(name, t)| {
                let id = if trainable(name) { g.param(t.clone()) } else { g.constant(t.clone()) };
                (name.clone(), id)
            })
            .collect();
        Self { ids }
    }

    /// Binds existing nodes under the given parameter names.
    pub fn from_ids(ids: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        Self { ids: ids.into_iter().collect() }
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids.get(name).copied().ok_or_else(|| shape_err!("unknown parameter {}", name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

fn conv_bias(g: &mut Graph, p: &BoundParams, name: &str, x: NodeId, geom: ConvGeometry) -> Result<NodeId> {
    let w = p.id(&format!("{}.weight", name))?;
    let b = p.id(&format!("{}.bias", name))?;
    let y = g.conv2d(x, w, geom)?;
    g.channel_bias(y, b)
}

/// Stride-8 feature map of a `[3, H, W]` image node.
pub fn backbone_forward(g: &mut Graph, p: &BoundParams, image: NodeId) -> Result<NodeId> {
    let (c, _, _) = g.value(image).dims3()?;
    if c != 3 {
        return Err(shape_err!("backbone expects 3 input channels, got {}", c));
    }
    let mut x = image;
    for s in 0..4 {
        let geom = if s < 3 {
            ConvGeometry::new((1, 1), (1, 1)).with_stride((2, 2))
        } else {
            ConvGeometry::new((2, 2), (2, 2))
        };
        let y = conv_bias(g, p, &format!("backbone.{}", s), x, geom)?;
        x = g.relu(y);
    }
    Ok(x)
}

/// Sum over branches of the depthwise correlation between the dilated
/// exemplar and search projections.
pub fn combine_features(g: &mut Graph, p: &BoundParams, cfg: &NetConfig, fe: NodeId, fs: NodeId) -> Result<NodeId> {
    let (_, he, we) = g.value(fe).dims3()?;
    let (_, hs, ws) = g.value(fs).dims3()?;
    if he > hs || we > ws {
        return Err(shape_err!("exemplar feature {}x{} larger than search feature {}x{}", he, we, hs, ws));
    }
    let mut total: Option<NodeId> = None;
    for &(a, b) in &cfg.branch_dilations {
        // a is the horizontal dilation, b the vertical one
        let geom = ConvGeometry::new((b, a), (0, 0));
        let ze = conv_bias(g, p, &format!("combine.d{}{}.exemplar", a, b), fe, geom)?;
        let zs = conv_bias(g, p, &format!("combine.d{}{}.search", a, b), fs, geom)?;
        let corr = g.depthwise_xcorr(zs, ze)?;
        total = Some(match total {
            Some(t) => g.add(t, corr)?,
            None => corr,
        });
    }
    total.ok_or_else(|| Error::Config("no combination branch".into()))
}

fn tower(g: &mut Graph, p: &BoundParams, cfg: &NetConfig, prefix: &str, s: NodeId) -> Result<NodeId> {
    let same = ConvGeometry::new((1, 1), (1, 1));
    let mut x = s;
    for i in 0..cfg.tower_depth {
        let y = conv_bias(g, p, &format!("{}.tower.{}", prefix, i), x, same)?;
        x = g.relu(y);
    }
    conv_bias(g, p, &format!("{}.out", prefix), x, same)
}

/// `[4, H, W]` nonnegative pixel distances `exp(clamp(o)) * stride`.
pub fn regression_head(g: &mut Graph, p: &BoundParams, cfg: &NetConfig, s: NodeId) -> Result<NodeId> {
    let o = tower(g, p, cfg, "reg", s)?;
    let c = g.clamp(o, -cfg.reg_clamp, cfg.reg_clamp);
    let e = g.exp(c)?;
    g.scale(e, STRIDE as Real)
}

/// Regular and object-aware probabilities, each `[H, W]`.
pub fn classification_heads(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &NetConfig,
    s: NodeId,
    reg: NodeId,
) -> Result<(NodeId, NodeId)> {
    let (_, h, w) = g.value(s).dims3()?;
    let logit_r = tower(g, p, cfg, "cls", s)?;
    let p_r = g.sigmoid(logit_r);
    let p_r = g.reshape(p_r, &[h, w])?;

    let grid = GridSpec::centered(h, STRIDE as Real, cfg.search_size as Real);
    let boxes = decode_boxes(g.value(reg), &grid)?;
    let field = compute_offsets(&boxes_to_grid_units(&boxes, &grid)?, cfg.align_kernel)?;
    let wt = p.id("oa.weight")?;
    let b = p.id("oa.bias")?;
    let y = if cfg.couple_offsets {
        g.aligned_conv_coupled(s, wt, field, reg, grid.stride)?
    } else {
        g.aligned_conv(s, wt, field)?
    };
    let y = g.channel_bias(y, b)?;
    let p_o = g.sigmoid(y);
    let p_o = g.reshape(p_o, &[h, w])?;
    Ok((p_r, p_o))
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub score: NodeId,
    pub reg: NodeId,
    pub p_r: NodeId,
    pub p_o: NodeId,
}

/// Heads on top of an exemplar feature node and a search image node.
pub fn forward_from_exemplar_feature(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &NetConfig,
    exemplar_feature: NodeId,
    search: NodeId,
) -> Result<HeadOutputs> {
    let fs = backbone_forward(g, p, search)?;
    let score = combine_features(g, p, cfg, exemplar_feature, fs)?;
    let reg = regression_head(g, p, cfg, score)?;
    let (p_r, p_o) = classification_heads(g, p, cfg, score, reg)?;
    Ok(HeadOutputs { score, reg, p_r, p_o })
}

/// Full pair forward pass.
pub fn forward_pair(g: &mut Graph, p: &BoundParams, cfg: &NetConfig, exemplar: NodeId, search: NodeId) -> Result<HeadOutputs> {
    let fe = backbone_forward(g, p, exemplar)?;
    forward_from_exemplar_feature(g, p, cfg, fe, search)
}

/// Values of one inference pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub reg: Tensor,
    pub p_r: Tensor,
    pub p_o: Tensor,
}

/// Exemplar feature of a preprocessed `[3, H, W]` crop, without gradients.
pub fn exemplar_feature(params: &ModelParams, exemplar: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, params, |_| false);
    let x = g.constant(exemplar.clone());
    let f = backbone_forward(&mut g, &p, x)?;
    Ok(g.value(f).clone())
}

/// Inference from a stored exemplar feature and a preprocessed search crop.
pub fn predict(params: &ModelParams, cfg: &NetConfig, exemplar_feature: &Tensor, search: &Tensor) -> Result<Prediction> {
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, params, |_| false);
    let fe = g.constant(exemplar_feature.clone());
    let x = g.constant(search.clone());
    let out = forward_from_exemplar_feature(&mut g, &p, cfg, fe, x)?;
    Ok(Prediction { reg: g.value(out.reg).clone(), p_r: g.value(out.p_r).clone(), p_o: g.value(out.p_o).clone() })
}

/// Maps pixel values in `[0, 1]` to the zero-centred network input.
pub fn preprocess(crop: &Tensor) -> Tensor {
    crop.map(|v| v - 0.5)
}
