//! The `ocean` subcommands.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ocean_core::gradsuite::{end_to_end_check, op_checks};
use ocean_core::harness::metrics::{aggregate, run_sequence, score_predictions, SequenceResult};
use ocean_core::harness::{gen_sequence, train, FrameSource, Scene};
use ocean_core::network::{ModelParams, NetConfig};
use ocean_core::tracker::{NetworkScorer, OceanTracker, TrackHyper, Tracker};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io;
use crate::weights;

pub const WEIGHTS_FILE: &str = "weights.ocwt";
pub const LAST_GOOD_FILE: &str = "last_good.ocwt";
pub const LOSS_FILE: &str = "loss.csv";
pub const PREDICTIONS_FILE: &str = "predictions.txt";

#[derive(Debug, Parser)]
#[command(name = "ocean", version, about = "Anchor-free Siamese tracker: training, tracking and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network on synthetic pairs; writes weights and loss.csv.
    Train(TrainArgs),
    /// Track a sequence directory; writes the prediction log.
    Track(TrackArgs),
    /// Score a prediction log, or evaluate weights on a synthetic suite.
    Eval(EvalArgs),
    /// Generate a synthetic sequence directory.
    Gen(GenArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    pub fn load(&self) -> CliResult<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        match self.seed {
            Some(s) => cfg.with_seed(s),
            None => Ok(cfg),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnlineProvider {
    None,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub weights: PathBuf,
    /// Sequence directory with frames and groundtruth.txt.
    pub sequence: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the fused score map of every tracked frame.
    #[arg(long)]
    pub emit_scores: bool,
    #[arg(long, value_enum, default_value = "none")]
    pub online_provider: OnlineProvider,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Prediction log to score against `--groundtruth`.
    #[arg(long, requires = "groundtruth", conflicts_with = "weights")]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub groundtruth: Option<PathBuf>,
    /// Weights to evaluate on the configured synthetic suite.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check only this seed instead of seeds 0 to 9.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Track(a) => cmd_track(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gen(a) => cmd_gen(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = a.common.load()?;
    io::create_dir(&a.out)?;
    match train(&cfg.train, &cfg.net) {
        Ok(out) => {
            weights::save(&a.out.join(WEIGHTS_FILE), &out.params)?;
            io::write_loss_csv(&a.out.join(LOSS_FILE), &out.history)
        }
        Err(abort) => {
            weights::save(&a.out.join(LAST_GOOD_FILE), &abort.last_good)?;
            io::write_loss_csv(&a.out.join(LOSS_FILE), &abort.history)?;
            Err(abort.error.into())
        }
    }
}

/// Tracks one sequence, returning the log with the init box first and the
/// score map of every later frame.
pub fn track_sequence(
    params: &ModelParams,
    net: &NetConfig,
    hyper: &TrackHyper,
    seq: &dyn FrameSource,
) -> CliResult<(Vec<ocean_core::geometry::BBox>, Vec<ocean_core::Tensor>)> {
    let scorer = NetworkScorer::new(params, net)?;
    let mut tracker = OceanTracker::new(&scorer, hyper.clone());
    let gt = seq.groundtruth();
    let first = gt.first().ok_or_else(|| CliError::Config("sequence has no groundtruth".into()))?;
    tracker.init(&seq.frame(0)?, *first)?;
    let mut boxes = vec![*first];
    let mut scores = Vec::new();
    for t in 1..seq.len() {
        boxes.push(tracker.update(&seq.frame(t)?)?);
        scores.extend(tracker.last_scores().cloned());
    }
    Ok((boxes, scores))
}

fn cmd_track(a: &TrackArgs) -> CliResult<()> {
    let cfg = a.common.load()?;
    let params = weights::load(&a.weights, &cfg.net)?;
    let seq = io::read_sequence(&a.sequence)?;
    // `none` is the only provider: the offline scores are used unchanged.
    let OnlineProvider::None = a.online_provider;
    let (boxes, scores) = track_sequence(&params, &cfg.net, &cfg.track, &seq)?;
    io::create_dir(&a.out)?;
    io::write_boxes(&a.out.join(PREDICTIONS_FILE), &boxes)?;
    if a.emit_scores {
        let dir = io::scores_dir(&a.out);
        io::create_dir(&dir)?;
        for (i, s) in scores.iter().enumerate() {
            io::write_score_map(&dir.join(format!("{:05}.csv", i + 1)), s)?;
        }
    }
    Ok(())
}

/// Evaluates weights on the configured suite, one sequence per worker.
pub fn evaluate_suite(params: &ModelParams, cfg: &RunConfig) -> CliResult<Vec<SequenceResult>> {
    let scorer = NetworkScorer::new(params, &cfg.net)?;
    let e = &cfg.eval;
    (0..e.sequences as u64)
        .into_par_iter()
        .map(|i| {
            let scene = Scene::new(&e.suite.scene(e.first_seed + i))?;
            let mut tracker = OceanTracker::new(&scorer, cfg.track.clone());
            Ok(run_sequence(&mut tracker, &scene, e.protocol)?)
        })
        .collect()
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let cfg = a.common.load()?;
    let results = match (&a.predictions, &a.groundtruth, &a.weights) {
        (Some(p), Some(g), None) => vec![score_predictions(&io::read_boxes(p)?, &io::read_boxes(g)?)?],
        (None, None, Some(w)) => evaluate_suite(&weights::load(w, &cfg.net)?, &cfg)?,
        _ => return Err(CliError::Config("eval needs either --predictions with --groundtruth, or --weights".into())),
    };
    let report = aggregate(&results)?;
    io::create_dir(&a.out)?;
    io::write_metrics(&a.out, &report)?;
    print!("{}", io::format_metrics(&report));
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> CliResult<()> {
    let cfg = a.common.load()?;
    io::write_sequence(&a.out, &gen_sequence(&cfg.scene)?)
}

fn report_line(seed: u64, name: &str, r: &ocean_core::gradcheck::GradCheckReport) -> String {
    format!(
        "seed {} {:<22} max_rel_err {:.3e} checked {} refined {} {}",
        seed,
        name,
        r.max_rel_err,
        r.checked,
        r.refined,
        if r.pass { "ok" } else { "FAIL" }
    )
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let seeds: Vec<u64> = match a.seed {
        Some(s) => vec![s],
        None => (0..10).collect(),
    };
    let mut failed = Vec::new();
    for seed in seeds {
        let mut reports = op_checks(seed)?;
        reports.push(("end_to_end".into(), end_to_end_check(seed)?));
        for (name, r) in reports {
            println!("{}", report_line(seed, &name, &r));
            if !r.pass {
                failed.push(format!("{} (seed {})", name, seed));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}
