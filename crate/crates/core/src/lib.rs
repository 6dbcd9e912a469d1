//! Bayesian-neural-network optimization proxies trained from few labels.
//!
//! The crate learns a map from problem inputs to near-optimal decisions for
//! constrained problems, alternating supervised variational inference on
//! solved instances with a feasibility-driven stage on cheap unlabeled
//! inputs. Posterior samples feed selection-by-posterior and concentration
//! bounds on the expected prediction error.

pub mod autodiff;
pub mod bounds;
pub mod dataset;
pub mod posterior;
pub mod problems;
pub mod rng;
pub mod sandwich;
pub mod vi;
