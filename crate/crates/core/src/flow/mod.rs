//! Real NVP normalizing flow over feature vectors.
//!
//! A [`FlowModel`] maps a feature vector `x` to a latent `z` through a chain
//! of [`CouplingLayer`]s and evaluates the exact log-density
//!
//! ```text
//! log p(x) = log N(z; 0, I) + sum_l log|det J_l|
//! ```
//!
//! Fresh models compute the identity map, so they assign every point the
//! standard normal density. [`train`] fits the parameters by minimizing the
//! mean NLL of a background [`FeatureDataset`](crate::feature_store::FeatureDataset)
//! with Adam, stopping early on a held-out validation NLL.

mod coupling;
mod io;
mod mlp;
mod model;
mod train;

pub use coupling::{alternating_mask, CouplingGradient, CouplingLayer, INITIAL_SCALE_CAP};
pub use io::{decode_model, encode_model, read_model, write_model};
pub use mlp::Mlp;
pub use model::{standard_normal_log_density, FlowGradient, FlowModel, LN_2PI};
pub use train::{standardization, train, train_with_validation, Adam, EpochRecord, TrainConfig, TrainingLog};
