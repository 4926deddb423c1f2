//! Cascaded flow-matching precipitation nowcasting.
//!
//! A deterministic backbone predicts the posterior-mean sequence; a Rectifier
//! flow model corrects its lead-time-growing shift segment by segment; a
//! Generator flow model samples the final forecast conditioned on the
//! rectified mean. Everything runs on a small self-contained CPU tensor
//! substrate with reverse-mode differentiation.

pub mod autodiff;
pub mod backbone;
pub mod cascade;
pub mod data;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod real;
pub mod stunet;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use real::Real;
pub use tensor::Tensor;
