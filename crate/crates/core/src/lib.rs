//! Flow matching with an isokinetic (acceleration) regularizer on low-dimensional
//! synthetic data.
//!
//! The crate covers the whole experimental loop: a small reverse-mode autodiff
//! engine, an MLP velocity field, toy datasets, minibatch optimal-transport
//! coupling, the training objectives, the optimizer harness, few-step ODE
//! samplers, trajectory-geometry diagnostics, a closed-form Gaussian-mixture
//! oracle and distribution metrics. [`experiment`] wires them into the
//! `isoflow` command-line tool.

pub mod autodiff;
pub mod coupling;
pub mod data;
pub mod diagnostics;
pub mod experiment;
pub mod field;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod oracle;
pub mod points;
pub mod sampler;
pub mod trainer;

pub use points::Points;
