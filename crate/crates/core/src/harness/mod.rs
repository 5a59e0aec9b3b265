//! Synthetic data, training and evaluation.

pub mod metrics;
pub mod synth;
pub mod train;

pub use metrics::{aggregate, evaluate, run_sequence, score_predictions, MetricsReport, Protocol, SequenceResult};
pub use synth::{gen_sequence, FrameSource, Scene, Sequence, SyntheticSceneConfig, TextureKind};
pub use train::{overfit_single_pair, train, LossRecord, TrainAbort, TrainConfig, TrainOutcome, Trainer, TrainingPair};
