//! Bayesian convolutional networks trained by Bayes by Backprop with the
//! local reparameterization trick, plus aleatoric/epistemic uncertainty
//! estimation through Softplus normalization.
//!
//! Module map:
//!
//! * [`tensor`]: dense tensors and a reverse-mode tape.
//! * [`data`]: MNIST/CIFAR parsing, input adaptation, pixel noise, batching.
//! * [`layers`]: Gaussian variational layers (mean path + variance path).
//! * [`objective`]: KL complexity cost, categorical likelihood, free energy.
//! * [`uncertainty`]: MC predictive sampling and variance decomposition.
//! * [`zoo`]: LeNet-5, AlexNet and VGG built from variational layers.
//! * [`train`]: Adam, checkpoints, metrics, train/eval/sweep drivers.

// `!(x > 0.0)` is used on purpose so NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod layers;
pub mod objective;
pub mod tensor;
pub mod train;
pub mod uncertainty;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

/// Scalar type used by every tensor in the engine.
pub type Real = f64;
