//! Convolutional-recurrent state classifier, implemented from scratch.
//!
//! Everything is generic over [`Scalar`](crate::Scalar). Sequences are laid
//! out row-major as `time × channels` and only the valid prefix of a padded
//! sequence is ever touched, so padding never leaks into outputs or
//! gradients.

mod act;
mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod model;
mod train;

pub use act::Activation;
pub use adam::Adam;
pub use checkpoint::{checkpoint_dtype, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{
    check_conv, check_dense, check_dice, check_gru, gradient_check, max_relative_error, model_gradients, numeric_gradient,
    random_batch, relative_error, tiny_config, GradCheck, DEFAULT_STEP,
};
pub use layers::{Conv1d, Dense, Gru, GruCache};
pub use loss::{dice_loss, DiceKind, DICE_EPS};
pub use model::{argmax_rows, BatchTensor, ConvSpec, Grads, Layer, Model, ModelConfig, TensorInfo, Trace, Variant};
pub use train::{
    dataset_loss, fine_tune, prepare, train, EpochRecord, FineTuneOptions, History, LayerSelector, Prepared,
};
