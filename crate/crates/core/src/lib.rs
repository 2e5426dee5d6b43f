//! Walsh-Hadamard variational inference.
//!
//! Structured Gaussian posteriors over weight matrices of the form
//! `W = S1 H diag(g) H S2`, trained by stochastic ELBO maximization, for
//! Bayesian neural network regression and random-feature Gaussian process
//! regression.

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod fwht;
pub mod layer;
pub mod models;
pub mod params;
pub mod tensor;
pub mod train;
pub mod whvi;

pub use autodiff::{gaussian_nll, Tape, Var};
pub use fwht::{fwht_inplace, naive_hadamard, HadamardDim};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{Tensor, TensorError};
