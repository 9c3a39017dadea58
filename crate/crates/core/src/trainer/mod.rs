//! Classifier training with pixel-space baselines and flow-based augmentation.

mod baselines;
mod classifier;
mod losses;
mod train;

pub use baselines::{cutmix_batch, cutmix_with_rect, cutout, cutout_at, mixup_batch, mixup_with_lambda, one_hot, Rect};
pub use classifier::{Classifier, ClassifierArch};
pub use losses::{
    cross_entropy, loss_combine, loss_flowaug, loss_flowaug_std, weighted_ce, Batch, FlowGaussian, FlowMix, Identity,
    LossEval, Term, Transform,
};
pub use train::{accuracy, train, train_with, write_predictions, EpochLog, Method, TrainConfig, TrainLog, TrainOutcome};
