//! Sequential Bayesian optimal experimental design by policy gradient.
//!
//! The engine learns a deterministic design policy for a fixed number of
//! experiments while simultaneously fitting variational posteriors whose
//! one-point log-ratios serve as information-gain rewards. Finite toy
//! problems can be solved exactly through [`oracle`], which is how the
//! equivalence results between reward formulations are checked.
//!
//! Interchangeable parts (environments, posterior families, policies) sit
//! behind traits and are looked up by name through [`registry::Registry`].

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod error;
pub mod evaluation;
pub mod history;
pub mod nn;
pub mod oracle;
pub mod posteriors;
pub mod prob;
pub mod registry;
pub mod rewards;
pub mod rng;

pub use error::{Error, Result};
