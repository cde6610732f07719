//! Adversarial objectives, the training loop, checkpoint files and
//! annotation aggregation.

pub mod annotations;
pub mod checkpoint;
pub mod losses;
pub mod train;

pub use annotations::{aggregate_annotations, AnnotationRecord, AnnotationSummary};
pub use checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint, CheckpointKind};
pub use losses::{discriminator_loss, generator_loss, GeneratorLossBreakdown, LossWeights, PROB_EPS};
pub use train::{TrainConfig, TrainReport, Trainer, TrainingSample, TrainingSet, UpdateSchedule};
