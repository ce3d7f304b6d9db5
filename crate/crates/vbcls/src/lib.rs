//! Variational conditional alignment with posterior label-shift correction
//! for multi-domain classification.
//!
//! The crate trains a small variational model on several labeled source
//! domains at once: an encoder maps a feature vector and a label guess to a
//! latent Gaussian, per-domain decoders reconstruct the input, a label-prior
//! head predicts labels from raw features, and a latent classifier predicts
//! labels from the latent mean. At prediction time the classifier's softmax
//! is reweighted from the pooled source label prior toward a target prior,
//! which can be given, taken from counts, or estimated by fixed-point
//! refinement. Everything runs on a bundled reverse-mode tape over `f64`
//! matrices, so gradients are exact and runs are bit-reproducible.
//!
//! Entry points: [`shiftgen::make_benchmark`] builds synthetic multi-domain
//! data, [`model::train`] fits one variant, [`harness::run_leave_one_out`]
//! runs the full hold-one-domain-out protocol, and the `vbcls` binary wraps
//! those as subcommands.

pub mod autodiff;
pub mod distributions;
pub mod error;
pub mod harness;
pub mod labelshift;
pub mod model;
pub mod shiftgen;

pub use error::{Error, Result};
