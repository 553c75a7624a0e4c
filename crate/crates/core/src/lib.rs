//! Neural processes on discretized input grids.
//!
//! The crate implements four members of the neural-process family for 1-D
//! meta-regression: the conditional NP (CNP), the latent NP (NP), the
//! convolutional CNP (ConvCNP) and [`models::ModelKind::GbConp`], a
//! convolutional NP with a single global latent variable shared by every
//! grid location. Everything is built on the small reverse-mode engine in
//! [`autodiff`].

// Validation is written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod container;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod models;
pub mod parallel;
pub mod seed;
pub mod setconv;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
