//! Probabilistic partition-of-unity regression.
//!
//! A residual network with a softmax head partitions input space; each
//! partition carries a Gaussian noise component, so at every input the label
//! is modelled as a Gaussian mixture. Training proceeds in three stages:
//!
//! 1. Adam on the mixture negative log-likelihood with the polynomial part
//!    held at zero, which clusters labels and sharpens the partitions.
//! 2. PCA bisection of the partitions ([`refine`]) followed by a
//!    partition-weighted polynomial least-squares fit ([`polyfit`]).
//! 3. Adam on the noise scales alone, with means fixed at zero.
//!
//! The fitted model predicts a piecewise-polynomial mean together with a
//! closed-form variance ([`mixture::predict`]).

pub mod data_io;
pub mod mixture;
pub mod numerics;
pub mod polyfit;
pub mod pou_net;
pub mod refine;
pub mod study;
pub mod trainer;

pub use data_io::{DataError, Dataset, SnapshotDatabase};
pub use mixture::{NoiseModel, Prediction};
pub use polyfit::{LsWeighting, PolynomialSet};
pub use pou_net::{InputAffine, PouNetwork};
pub use refine::RefinementForest;
pub use trainer::{fit, FittedModel, TrainConfig, TrainError};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Net(#[from] pou_net::NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] Box<TrainError>),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        Error::Train(Box::new(e))
    }
}
