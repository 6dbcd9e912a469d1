//! Mean-field Gaussian variational inference over MLP weights.

mod adam;
mod elbo;
mod mlp;
mod posterior;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::problems::ProblemError;

pub use adam::{svi_step, Adam, AdamConfig};
pub use elbo::{
    unsupervised_trainable, Draw, ElboEstimate, SupervisedObjective, UnsupervisedObjective,
    SIGMA_U2,
};
pub use mlp::{LayerSlot, MlpSpec, SigmoidRepair, SubNetwork};
pub use posterior::{
    init_posterior, kl_gradient, kl_mean_field, sample_weights, standard_normals,
    MeanFieldPosterior, NoiseFactor, PriorSpec, NOISE_VAR_MEAN, NOISE_VAR_VARIANCE,
};

#[derive(Debug, Error)]
pub enum ViError {
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {term}")]
    NonFinite { term: String },
    #[error("non-finite feasibility at unlabeled sample {sample}")]
    NonFiniteSample { sample: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

pub type Result<T> = std::result::Result<T, ViError>;
