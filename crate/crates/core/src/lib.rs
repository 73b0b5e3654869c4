//! Rectified flow matching on small conditional tasks.
//!
//! The crate is `no_std` (it needs `alloc`) and carries every numeric piece of
//! the pipeline: a reverse-mode autodiff tape over dense tensors, the
//! conditional vector-field estimator, the first-stage training objective with
//! logit-normal re-weighting and condition dropout, Euler and Dormand–Prince
//! samplers with classifier-free guidance, guided-field reflow and one-step
//! distillation, synthetic tasks with known ground truth, and the evaluation
//! metrics. File formats, wall clocks, threads and the CLI live in
//! `rflow-lab`.
//!
//! Time runs from `t = 0` (Gaussian noise) to `t = 1` (data). A trained field
//! `v(x, t | c)` transports noise to data along `dx = v dt`.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod estimator;
pub mod exec;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod real;
pub mod rectify;
pub mod rfm;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod toydata;

pub use error::{Error, Result};
pub use estimator::{ConditionSeq, Estimator, EstimatorConfig, LatentSeq};
pub use exec::{Executor, Sequential};
pub use graph::{Graph, Var};
pub use params::LayerParams;
pub use real::Real;
pub use sampler::{GuidanceConfig, SolverConfig, SolverKind, Trajectory, VectorField};
pub use tensor::Tensor;
