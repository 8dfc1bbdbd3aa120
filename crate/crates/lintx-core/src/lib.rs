//! Feature-space linear style transfer.
//!
//! The pipeline is: encode an image into a C x N feature map with a small
//! convolutional encoder, move the feature statistics (channel means and
//! covariance) of the content image onto those of a style image with a
//! single linear map per image pair, then decode back to pixels. The linear
//! map can be computed in closed form from eigendecompositions of the two
//! covariance matrices, approximated cheaply per channel, or predicted by a
//! small trained network that avoids any decomposition at run time.
//!
//! Layout:
//! - [`tensor`]: dense row-major f64 tensors, matrix multiply, a cyclic
//!   Jacobi symmetric eigensolver, and SPD matrix powers.
//! - [`stats`]: feature maps and their second-order statistics.
//! - [`transfer`]: the closed-form transform, its cheaper variants, the
//!   verification residuals, and masked region-wise application.
//! - [`autodiff`]: a reverse-mode graph over a fixed op set, large enough to
//!   express the encoder, decoder, transform predictor, and losses.
//! - [`optim`]: Adam.
//! - [`model`]: seeded encoder/decoder/transform-predictor construction and
//!   the feature-space stylize path shared by every front end.
//! - [`weights`]: the LSTW weight container file format.
//! - [`trainer`]: losses, decoder pretraining, transform training.
//! - [`data`]: procedural content/style image generators used by the desk
//!   training runs and the verification suite.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod stats;
pub mod tensor;
pub mod trainer;
pub mod transfer;
pub mod weights;

pub use error::{CoreError, Result};
