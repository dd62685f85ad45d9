//! Minimal reverse-mode differentiable kernel for feed-forward transformer
//! stacks, with a finite-difference gradient checker.

mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, RELATIVE_FLOOR};
pub use graph::{sinusoidal_positions, Graph, Var};
pub use params::{site_rng, stable_hash, Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
