//! Item response models: 1PL, 2PL, multidimensional IRT with per-item or
//! content-aware item traits, and the gated ICL extension, trained with
//! minibatch Adam on binary cross-entropy.

pub mod io;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod train;

pub use metrics::{auc, pearson};
pub use model::{init_params, sigmoid, Adam, IrtConfig, IrtParams, ItemMode, ItemRef, Layout, Observation, Variant};
pub use train::{
    difficulty_learnability_correlation, evaluate, predict_pairs, predicted_zone, train, Correlation, Evaluation,
    IrtData, Row, TrainingHistory,
};
