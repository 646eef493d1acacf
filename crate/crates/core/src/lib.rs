//! Kernel-smoothed robust training.
//!
//! A small dense-tensor reverse-mode autodiff ([`tape`]), the model zoo used
//! in the experiments ([`models`]), cost functions and c-exponential kernels
//! ([`kernels`]), the k-transform and related surrogates ([`surrogates`]),
//! training loops ([`trainers`]) and robustness evaluation ([`robusteval`]).

pub mod error;
pub mod kernels;
pub mod models;
pub mod robusteval;
pub mod seed;
pub mod surrogates;
pub mod tape;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
