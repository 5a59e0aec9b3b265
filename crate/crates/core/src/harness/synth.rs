//! Seeded synthetic tracking sequences: a textured target rectangle moving
//! over a smooth background, with optional look-alike distractors,
//! occlusion and pixel noise.

use alloc::vec::Vec;
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Checker,
    Stripes,
    Rings,
    Quadrants,
}

impl TextureKind {
    pub const ALL: [TextureKind; 4] = [TextureKind::Checker, TextureKind::Stripes, TextureKind::Rings, TextureKind::Quadrants];
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneConfig {
    pub frame_width: usize,
    pub frame_height: usize,
    pub num_frames: usize,
    pub target_width: Real,
    pub target_height: Real,
    pub texture: TextureKind,
    /// Initial target centre.
    pub start: (Real, Real),
    /// Pixels per frame; reflected at the frame border.
    pub velocity: (Real, Real),
    /// Relative size change per frame.
    pub scale_drift: Real,
    pub distractors: usize,
    /// `(first frame, length)` of an occluding bar over the target.
    pub occlusion: Option<(usize, usize)>,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: Real,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            frame_width: 192,
            frame_height: 192,
            num_frames: 60,
            target_width: 32.0,
            target_height: 32.0,
            texture: TextureKind::Checker,
            start: (96.0, 96.0),
            velocity: (0.0, 0.0),
            scale_drift: 0.0,
            distractors: 0,
            occlusion: None,
            noise: 0.02,
            seed: 0,
        }
    }
}

fn random_motion(rng: &mut ChaCha8Rng, max_speed: Real, max_drift: Real) -> ((Real, Real), Real) {
    let angle: Real = rng.gen_range(0.0..core::f64::consts::TAU as Real);
    let speed: Real = rng.gen_range(0.5..=max_speed);
    let drift: Real = rng.gen_range(-max_drift..=max_drift);
    ((speed * angle.cos(), speed * angle.sin()), drift)
}

impl SyntheticSceneConfig {
    fn random_base(rng: &mut ChaCha8Rng, seed: u64) -> Self {
        let base = Self::default();
        let w: Real = rng.gen_range(20.0..40.0);
        let aspect: Real = rng.gen_range(0.7..1.4);
        let h = (w * aspect).clamp(16.0, 48.0);
        let margin = 40.0;
        let start = (
            rng.gen_range(margin..base.frame_width as Real - margin),
            rng.gen_range(margin..base.frame_height as Real - margin),
        );
        Self {
            target_width: w,
            target_height: h,
            texture: TextureKind::ALL[rng.gen_range(0..4)],
            start,
            seed,
            ..base
        }
    }

    /// Constant velocity up to 3 px/frame, drift up to 1%/frame, no clutter.
    pub fn easy(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xea5e);
        let base = Self::random_base(&mut rng, seed);
        let (velocity, scale_drift) = random_motion(&mut rng, 3.0, 0.01);
        Self { velocity, scale_drift, ..base }
    }

    /// Faster motion, look-alike distractors, occlusion and stronger noise.
    pub fn hard(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4a7d);
        let base = Self::random_base(&mut rng, seed);
        let (velocity, scale_drift) = random_motion(&mut rng, 4.0, 0.015);
        let occlusion = if rng.gen_bool(0.5) {
            Some((rng.gen_range(10..40), rng.gen_range(4..10)))
        } else {
            None
        };
        Self { velocity, scale_drift, distractors: rng.gen_range(1..=3), occlusion, noise: 0.05, ..base }
    }

    /// Training distribution: a mix of easy and hard scenes, some static.
    pub fn training(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a1);
        let mut cfg = if rng.gen_bool(0.5) { Self::easy(seed) } else { Self::hard(seed) };
        if rng.gen_bool(0.1) {
            cfg.velocity = (0.0, 0.0);
        }
        cfg.noise = rng.gen_range(0.0..0.06);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: alloc::string::String| Err(Error::Config(m));
        if self.frame_width < 8 || self.frame_height < 8 || self.num_frames == 0 {
            return cfg_err(alloc::format!(
                "frames must be at least 8x8 and non-empty, got {}x{} x {}",
                self.frame_width, self.frame_height, self.num_frames
            ));
        }
        if !(self.target_width > 0.0 && self.target_height > 0.0) {
            return cfg_err(alloc::format!("target size must be positive, got {}x{}", self.target_width, self.target_height));
        }
        if self.target_width >= self.frame_width as Real || self.target_height >= self.frame_height as Real {
            return cfg_err(alloc::format!(
                "target {}x{} does not fit in a {}x{} frame",
                self.target_width, self.target_height, self.frame_width, self.frame_height
            ));
        }
        if !(self.noise >= 0.0) || !(self.scale_drift > -1.0) {
            return cfg_err(alloc::format!("invalid noise {} or drift {}", self.noise, self.scale_drift));
        }
        let finite = [self.start.0, self.start.1, self.velocity.0, self.velocity.1, self.scale_drift, self.noise];
        if finite.iter().any(|v| !v.is_finite()) {
            return cfg_err("scene parameters must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Appearance {
    kind: TextureKind,
    colors: [[Real; 3]; 4],
    frequency: Real,
    angle: Real,
}

impl Appearance {
    fn random(rng: &mut ChaCha8Rng, kind: TextureKind) -> Self {
        let mut colors = [[0.0; 3]; 4];
        for c in colors.iter_mut() {
            for v in c.iter_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
        }
        // Keep the two main colours apart so the pattern is visible.
        for ch in 0..3 {
            if (colors[0][ch] - colors[1][ch]).abs() < 0.3 {
                colors[1][ch] = if colors[0][ch] > 0.5 { colors[0][ch] - 0.5 } else { colors[0][ch] + 0.5 };
            }
        }
        Self { kind, colors, frequency: rng.gen_range(2.0..4.0), angle: rng.gen_range(0.0..3.14) }
    }

    /// Similar look with jittered colours.
    fn lookalike(&self, rng: &mut ChaCha8Rng) -> Self {
        let mut a = self.clone();
        for c in a.colors.iter_mut() {
            for v in c.iter_mut() {
                *v = (*v + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0);
            }
        }
        a.frequency *= rng.gen_range(0.8..1.25);
        a
    }

    /// Colour at local coordinates `u, v` in `[0, 1)`.
    fn color(&self, u: Real, v: Real) -> [Real; 3] {
        let n = self.frequency;
        let idx = match self.kind {
            TextureKind::Checker => (((u * n).floor() + (v * n).floor()) as i64).rem_euclid(2) as usize,
            TextureKind::Stripes => {
                let t = (u - 0.5) * self.angle.cos() + (v - 0.5) * self.angle.sin();
                usize::from((t * n * 2.0).floor() as i64 % 2 != 0)
            }
            TextureKind::Rings => {
                let r = ((u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5)).sqrt();
                (r * n * 2.0).floor() as usize % 2
            }
            TextureKind::Quadrants => usize::from(u >= 0.5) + 2 * usize::from(v >= 0.5),
        };
        self.colors[idx]
    }
}

#[derive(Debug, Clone)]
struct Blob {
    cx: Real,
    cy: Real,
    inv_r2: Real,
    color: [Real; 3],
}

/// Box trajectory with wall reflection and multiplicative size drift.
fn trajectory(
    frames: usize,
    (fw, fh): (Real, Real),
    (w0, h0): (Real, Real),
    start: (Real, Real),
    velocity: (Real, Real),
    drift: Real,
) -> Vec<BBox> {
    let (mut cx, mut cy) = start;
    let (mut vx, mut vy) = velocity;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let f = (1.0 + drift).powi(t as i32);
        let w = (w0 * f).clamp(4.0, fw - 2.0);
        let h = (h0 * f).clamp(4.0, fh - 2.0);
        if t > 0 {
            cx += vx;
            cy += vy;
        }
        if cx - w / 2.0 < 0.0 {
            cx = w - cx;
            vx = vx.abs();
        }
        if cx + w / 2.0 > fw {
            cx = 2.0 * fw - w - cx;
            vx = -vx.abs();
        }
        if cy - h / 2.0 < 0.0 {
            cy = h - cy;
            vy = vy.abs();
        }
        if cy + h / 2.0 > fh {
            cy = 2.0 * fh - h - cy;
            vy = -vy.abs();
        }
        cx = cx.clamp(w / 2.0, fw - w / 2.0);
        cy = cy.clamp(h / 2.0, fh - h / 2.0);
        out.push(BBox::from_center(cx, cy, w, h));
    }
    out
}

/// Frame-by-frame access used by the tracker evaluation.
pub trait FrameSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn frame(&self, t: usize) -> Result<Tensor>;
    fn groundtruth(&self) -> &[BBox];
}

/// A scene whose frames are rendered on demand; any frame can be rendered
/// independently of the others.
#[derive(Debug, Clone)]
pub struct Scene {
    config: SyntheticSceneConfig,
    background: Tensor,
    target: Appearance,
    gt: Vec<BBox>,
    distractors: Vec<(Appearance, Vec<BBox>)>,
    occluder: Option<(usize, usize, BBox, [Real; 3])>,
}

impl Scene {
    pub fn new(config: &SyntheticSceneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (fw, fh) = (config.frame_width as Real, config.frame_height as Real);

        let base: [Real; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
        let blobs: Vec<Blob> = (0..6)
            .map(|_| {
                let r: Real = rng.gen_range(20.0..70.0);
                Blob {
                    cx: rng.gen_range(0.0..fw),
                    cy: rng.gen_range(0.0..fh),
                    inv_r2: 1.0 / (r * r),
                    color: [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)],
                }
            })
            .collect();
        let (w, h) = (config.frame_width, config.frame_height);
        let background = Tensor::from_fn(&[3, h, w], |i| {
            let ch = i / (w * h);
            let y = ((i / w) % h) as Real + 0.5;
            let x = (i % w) as Real + 0.5;
            let mut v = base[ch];
            for b in &blobs {
                let d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
                v += b.color[ch] * (-d2 * b.inv_r2).exp();
            }
            v.clamp(0.0, 1.0)
        });

        let target = Appearance::random(&mut rng, config.texture);
        let size = (config.target_width, config.target_height);
        let gt = trajectory(config.num_frames, (fw, fh), size, config.start, config.velocity, config.scale_drift);

        let distractors = (0..config.distractors)
            .map(|_| {
                let look = target.lookalike(&mut rng);
                let s = rng.gen_range(0.8..1.2);
                let dsize = (config.target_width * s, config.target_height * s);
                let start = (rng.gen_range(dsize.0..fw - dsize.0), rng.gen_range(dsize.1..fh - dsize.1));
                let (vel, _) = random_motion(&mut rng, 3.0, 0.0);
                (look, trajectory(config.num_frames, (fw, fh), dsize, start, vel, 0.0))
            })
            .collect();

        let occluder = config.occlusion.map(|(first, len)| {
            let at = gt[first.min(gt.len() - 1)];
            let bar = BBox::from_center(at.cx(), at.cy(), at.w() * 0.6, at.h() * 1.6);
            let color = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            (first, len, bar, color)
        });

        Ok(Self { config: config.clone(), background, target, gt, distractors, occluder })
    }

    pub fn config(&self) -> &SyntheticSceneConfig {
        &self.config
    }

    fn paint(img: &mut Tensor, b: &BBox, mut color: impl FnMut(Real, Real) -> [Real; 3]) {
        let (_, h, w) = img.dims3().expect("frame is rank 3");
        let ys = (b.y0.max(0.0).floor() as usize).min(h);
        let ye = (b.y1.max(0.0).ceil() as usize).min(h);
        let xs = (b.x0.max(0.0).floor() as usize).min(w);
        let xe = (b.x1.max(0.0).ceil() as usize).min(w);
        let plane = h * w;
        let data = img.data_mut();
        for y in ys..ye {
            let py = y as Real + 0.5;
            if py < b.y0 || py >= b.y1 {
                continue;
            }
            for x in xs..xe {
                let px = x as Real + 0.5;
                if px < b.x0 || px >= b.x1 {
                    continue;
                }
                let c = color((px - b.x0) / b.w(), (py - b.y0) / b.h());
                for (ch, v) in c.iter().enumerate() {
                    data[ch * plane + y * w + x] = *v;
                }
            }
        }
    }

    pub fn render(&self, t: usize) -> Result<Tensor> {
        if t >= self.gt.len() {
            return Err(Error::Usage(alloc::format!("frame {} outside a {}-frame scene", t, self.gt.len())));
        }
        let mut img = self.background.clone();
        for (look, traj) in &self.distractors {
            Self::paint(&mut img, &traj[t], |u, v| look.color(u, v));
        }
        Self::paint(&mut img, &self.gt[t], |u, v| self.target.color(u, v));
        if let Some((first, len, bar, color)) = &self.occluder {
            if t >= *first && t < first + len {
                Self::paint(&mut img, bar, |_, _| *color);
            }
        }
        if self.config.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (t as u64 + 1));
            let normal = Normal::new(0.0, self.config.noise).map_err(|e| Error::Config(alloc::format!("{}", e)))?;
            for v in img.data_mut() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        Ok(img)
    }
}

impl FrameSource for Scene {
    fn len(&self) -> usize {
        self.gt.len()
    }

    fn frame(&self, t: usize) -> Result<Tensor> {
        self.render(t)
    }

    fn groundtruth(&self) -> &[BBox] {
        &self.gt
    }
}

/// A fully materialized sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Tensor>,
    pub gt: Vec<BBox>,
}

impl Sequence {
    pub fn new(frames: Vec<Tensor>, gt: Vec<BBox>) -> Result<Self> {
        if frames.len() != gt.len() {
            return Err(Error::Usage(alloc::format!("{} frames but {} groundtruth boxes", frames.len(), gt.len())));
        }
        Ok(Self { frames, gt })
    }
}

impl FrameSource for Sequence {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn frame(&self, t: usize) -> Result<Tensor> {
        self.frames
            .get(t)
            .cloned()
            .ok_or_else(|| Error::Usage(alloc::format!("frame {} outside a {}-frame sequence", t, self.frames.len())))
    }

    fn groundtruth(&self) -> &[BBox] {
        &self.gt
    }
}

pub fn gen_sequence(config: &SyntheticSceneConfig) -> Result<Sequence> {
    let scene = Scene::new(config)?;
    let frames = (0..scene.len()).map(|t| scene.render(t)).collect::<Result<Vec<_>>>()?;
    Ok(Sequence { frames, gt: scene.gt })
}
