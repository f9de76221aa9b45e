//! Estimation of long-term heterogeneous dose-response curves from combined
//! observational and experimental data.
//!
//! The crate is organized around three stages: entropic optimal-transport
//! reweighting of observational units ([`ot`]), balanced representation
//! learning via a differentiable transport distance ([`balance`]), and a
//! varying-coefficient sequence model mapping short-term outcomes to a
//! long-term outcome ([`model`]). Supporting layers: a dense tensor type with
//! reverse-mode autodiff ([`tensor`], [`tape`]), neural building blocks
//! ([`nn`]), synthetic data generators ([`data`]), evaluation metrics
//! ([`metrics`]) and experiment orchestration ([`experiments`]).
//!
//! All numeric kernels are generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the experiment pipeline instantiates `f64` throughout.

// index-based loops are the house style for the numeric kernels
#![allow(clippy::needless_range_loop)]

pub mod balance;
pub mod checkpoint;
pub mod data;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod ot;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use scalar::Scalar;

/// Concrete aliases used by the pipeline.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tape::Tape<f64>;
