//! Data-free universal adversarial perturbations crafted from
//! pseudo-semantic priors.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]), toy CNN classifiers ([`nn`]) with a trainer, procedural
//! datasets, and the attack itself ([`attack`]) with its evaluation battery
//! ([`eval`]).
//!
//! The attack never touches a dataset: [`attack::craft`] takes a model and a
//! config only. Datasets exist to train models and to measure fooling rates.

pub mod attack;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod prior;
pub mod resample;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod transform;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
