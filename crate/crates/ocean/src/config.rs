//! Run configuration: flat `section.key = value` lines.
//!
//! Blank lines and `#` comments are ignored. Every key must be known and
//! may appear once; the whole file is validated before any work starts.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use ocean_core::harness::metrics::Protocol;
use ocean_core::harness::synth::{SyntheticSceneConfig, TextureKind};
use ocean_core::harness::train::TrainConfig;
use ocean_core::network::NetConfig;
use ocean_core::tracker::{PenaltyMode, TrackHyper};
use ocean_core::Real;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenePreset {
    Default,
    Easy,
    Hard,
    Training,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Easy,
    Hard,
}

impl Suite {
    pub fn scene(&self, seed: u64) -> SyntheticSceneConfig {
        match self {
            Suite::Easy => SyntheticSceneConfig::easy(seed),
            Suite::Hard => SyntheticSceneConfig::hard(seed),
        }
    }
}

/// Synthetic evaluation suite: `sequences` scenes seeded from `first_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub suite: Suite,
    pub sequences: usize,
    pub first_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { protocol: Protocol::Continuous, suite: Suite::Easy, sequences: 20, first_seed: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub track: TrackHyper,
    pub scene: SyntheticSceneConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_pairs(&[]).expect("defaults are valid")
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value.parse().map_err(|_| CliError::Config(format!("{}: cannot parse {:?}", key, value)))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> CliResult<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_pair(key: &str, value: &str) -> CliResult<(Real, Real)> {
    match parse_list::<Real>(key, value)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(CliError::Config(format!("{}: expected two comma-separated numbers, got {:?}", key, value))),
    }
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("{}: expected true or false, got {:?}", key, value))),
    }
}

/// Splits config text into `(key, value)` pairs.
pub fn tokenize(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got {:?}", n + 1, raw)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if !seen.insert(k.clone()) {
            return Err(CliError::Config(format!("{}: duplicate key", k)));
        }
        out.push((k, v));
    }
    Ok(out)
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> CliResult<Self> {
        Self::from_pairs(&tokenize(text)?)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> CliResult<Self> {
        let mut seed = 0u64;
        let mut preset = ScenePreset::Default;
        for (k, v) in pairs {
            match k.as_str() {
                "seed" => seed = parse(k, v)?,
                "scene.preset" => {
                    preset = match v.as_str() {
                        "default" => ScenePreset::Default,
                        "easy" => ScenePreset::Easy,
                        "hard" => ScenePreset::Hard,
                        "training" => ScenePreset::Training,
                        _ => return Err(CliError::Config(format!("{}: unknown preset {:?}", k, v))),
                    }
                }
                _ => {}
            }
        }
        let scene = match preset {
            ScenePreset::Default => SyntheticSceneConfig { seed, ..Default::default() },
            ScenePreset::Easy => SyntheticSceneConfig::easy(seed),
            ScenePreset::Hard => SyntheticSceneConfig::hard(seed),
            ScenePreset::Training => SyntheticSceneConfig::training(seed),
        };
        let mut cfg = RunConfig {
            seed,
            net: NetConfig::default(),
            train: TrainConfig { seed, ..TrainConfig::default() },
            track: TrackHyper::default(),
            scene,
            eval: EvalConfig::default(),
        };
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the seed of training and of the scene.
    pub fn with_seed(mut self, seed: u64) -> CliResult<Self> {
        self.seed = seed;
        self.train.seed = seed;
        self.scene.seed = seed;
        Ok(self)
    }

    fn set(&mut self, k: &str, v: &str) -> CliResult<()> {
        let (net, train, track, scene, eval) = (&mut self.net, &mut self.train, &mut self.track, &mut self.scene, &mut self.eval);
        match k {
            "seed" | "scene.preset" => {}
            "net.exemplar_size" => net.exemplar_size = parse(k, v)?,
            "net.search_size" => net.search_size = parse(k, v)?,
            "net.backbone_channels" => {
                net.backbone_channels = parse_list::<usize>(k, v)?
                    .try_into()
                    .map_err(|_| CliError::Config(format!("{}: expected four channel counts", k)))?
            }
            "net.combined_channels" => net.combined_channels = parse(k, v)?,
            "net.head_channels" => net.head_channels = parse(k, v)?,
            "net.tower_depth" => net.tower_depth = parse(k, v)?,
            "net.branches" => {
                net.branch_dilations = v
                    .split(',')
                    .map(|b| {
                        let (a, c) = b
                            .trim()
                            .split_once('x')
                            .ok_or_else(|| CliError::Config(format!("{}: expected AxB entries, got {:?}", k, b)))?;
                        Ok((parse(k, a)?, parse(k, c)?))
                    })
                    .collect::<CliResult<_>>()?
            }
            "net.align_kernel" => net.align_kernel = parse(k, v)?,
            "net.reg_clamp" => net.reg_clamp = parse(k, v)?,
            "net.couple_offsets" => net.couple_offsets = parse_bool(k, v)?,

            "train.epochs" => train.epochs = parse(k, v)?,
            "train.pairs_per_epoch" => train.pairs_per_epoch = parse(k, v)?,
            "train.batch_size" => train.batch_size = parse(k, v)?,
            "train.warmup_lr" => train.warmup_lr = parse(k, v)?,
            "train.peak_lr" => train.peak_lr = parse(k, v)?,
            "train.final_lr" => train.final_lr = parse(k, v)?,
            "train.momentum" => train.momentum = parse(k, v)?,
            "train.weight_decay" => train.weight_decay = parse(k, v)?,
            "train.freeze_backbone_epochs" => train.freeze_backbone_epochs = parse(k, v)?,
            "train.max_frame_gap" => train.max_frame_gap = parse(k, v)?,
            "train.shift_jitter" => train.shift_jitter = parse(k, v)?,
            "train.scale_jitter" => train.scale_jitter = parse(k, v)?,
            "train.label_radius" => train.label_radius = parse(k, v)?,
            "train.lambda1" => train.loss_weights.lambda1 = parse(k, v)?,
            "train.lambda2" => train.loss_weights.lambda2 = parse(k, v)?,

            "track.omega" => track.omega = parse(k, v)?,
            "track.k_pen" => track.k_pen = parse(k, v)?,
            "track.beta" => track.beta = parse(k, v)?,
            "track.omega_online" => track.omega_online = parse(k, v)?,
            "track.window_weight" => track.window_weight = parse(k, v)?,
            "track.min_size" => track.min_size = parse(k, v)?,
            "track.penalty" => {
                track.penalty_mode = match v {
                    "suppressive" => PenaltyMode::Suppressive,
                    "literal" => PenaltyMode::Literal,
                    _ => return Err(CliError::Config(format!("{}: expected suppressive or literal, got {:?}", k, v))),
                }
            }

            "scene.frame_width" => scene.frame_width = parse(k, v)?,
            "scene.frame_height" => scene.frame_height = parse(k, v)?,
            "scene.num_frames" => scene.num_frames = parse(k, v)?,
            "scene.target_width" => scene.target_width = parse(k, v)?,
            "scene.target_height" => scene.target_height = parse(k, v)?,
            "scene.texture" => {
                scene.texture = match v {
                    "checker" => TextureKind::Checker,
                    "stripes" => TextureKind::Stripes,
                    "rings" => TextureKind::Rings,
                    "quadrants" => TextureKind::Quadrants,
                    _ => return Err(CliError::Config(format!("{}: unknown texture {:?}", k, v))),
                }
            }
            "scene.start" => scene.start = parse_pair(k, v)?,
            "scene.velocity" => scene.velocity = parse_pair(k, v)?,
            "scene.scale_drift" => scene.scale_drift = parse(k, v)?,
            "scene.distractors" => scene.distractors = parse(k, v)?,
            "scene.occlusion" => {
                scene.occlusion = if v == "none" {
                    None
                } else {
                    match parse_list::<usize>(k, v)?.as_slice() {
                        [a, b] => Some((*a, *b)),
                        _ => return Err(CliError::Config(format!("{}: expected first,length or none", k))),
                    }
                }
            }
            "scene.noise" => scene.noise = parse(k, v)?,

            "eval.protocol" => {
                eval.protocol = match v {
                    "continuous" => Protocol::Continuous,
                    "restart" => Protocol::Restart,
                    _ => return Err(CliError::Config(format!("{}: expected continuous or restart, got {:?}", k, v))),
                }
            }
            "eval.suite" => {
                eval.suite = match v {
                    "easy" => Suite::Easy,
                    "hard" => Suite::Hard,
                    _ => return Err(CliError::Config(format!("{}: expected easy or hard, got {:?}", k, v))),
                }
            }
            "eval.sequences" => eval.sequences = parse(k, v)?,
            "eval.first_seed" => eval.first_seed = parse(k, v)?,
            _ => return Err(CliError::Config(format!("{}: unknown key", k))),
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        let wrap = |e: ocean_core::Error| CliError::Config(e.to_string());
        self.net.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.track.validate().map_err(wrap)?;
        self.scene.validate().map_err(wrap)?;
        if self.eval.sequences == 0 {
            return Err(CliError::Config("eval.sequences: must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::parse_str("net.tower_depht = 3").unwrap_err();
        assert!(e.to_string().contains("net.tower_depht"), "{}", e);
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn values_are_applied() {
        let c = RunConfig::parse_str("seed = 7\n# comment\nnet.branches = 1x1\ntrack.penalty = literal\nscene.velocity = 2, 0\n").unwrap();
        assert_eq!(c.net.branch_dilations, vec![(1, 1)]);
        assert_eq!(c.track.penalty_mode, PenaltyMode::Literal);
        assert_eq!(c.scene.velocity, (2.0, 0.0));
        assert_eq!((c.train.seed, c.scene.seed), (7, 7));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse_str("track.omega = 1.5").is_err());
        assert!(RunConfig::parse_str("train.epochs = many").is_err());
        assert!(RunConfig::parse_str("seed = 1\nseed = 2").is_err());
    }
}
