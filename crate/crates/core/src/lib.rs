//! Numerical core for training compact radar-camera depth students.
//!
//! Everything here is pure computation over in-memory tensors: a define-by-run
//! reverse-mode autodiff [`Graph`], the FiLM / point-wise DASPP building blocks,
//! Grad-CAM saliency alignment, depth-distribution distillation, supervised
//! losses and metrics, a deterministic synthetic scene generator and the
//! teacher/student training loop. File formats and the command line live in
//! the `xdkd` companion crate.
//!
//! The crate builds without `std` (it needs `alloc`); the default `std`
//! feature only enables runtime CPU detection in the GEMM backend.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod depthdist;
mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod saliency;
pub mod supervision;
pub mod synthetic;
mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
