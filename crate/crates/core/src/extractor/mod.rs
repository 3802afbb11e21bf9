//! The RF-fingerprint extractor, its cosine-softmax metric head, SGD
//! training, and the cosine-threshold verification rule.

mod head;
mod model;
mod train;

pub use head::{
    cosine_distance, embedding_loss, mle_loss, posterior, posteriors, verify, Decision, MetricHead, VerificationPolicy,
    DEFAULT_SCALE,
};
pub use model::{Architecture, ConvSpec, Embedding, ExtractorModel, LayerKind, WeightOverrides};
pub use train::{
    fit, mle_loss_gradients, record_metric_loss, sgd_step, train_base, validation_auc, EpochMetrics, TrainOutcome,
    Trainable, TrainerConfig,
};

pub(crate) mod train_internals {
    pub use super::train::FullTrainer;
}
