//! Gradient-field momentum contrastive pretraining for monocular depth
//! estimation, at desk scale.
//!
//! The pipeline: [`gradfield`] turns each RGB image into a Canny-gated
//! gradient-magnitude field; [`contrast`] pretrains an [`encoder`] with the
//! RGB image as query and its gradient field as key; [`depth`] fine-tunes the
//! pretrained encoder under a decoder for depth regression; [`metrics`]
//! scores predictions. Everything runs on the small reverse-mode engine in
//! [`autodiff`].

// `!(x > 0.0)` is used on purpose throughout so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod contrast;
pub mod data;
pub mod depth;
pub mod encoder;
pub mod error;
pub mod gradfield;
pub mod metrics;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
