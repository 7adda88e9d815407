//! Reactive-power control policies for grid-connected inverters, trained by
//! stochastic primal-dual optimization directly through the AC power-flow
//! equations.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`feeder`]: network model, bus admittance matrix, and the symmetric
//!   injection matrices that express power injections as quadratic forms of
//!   the rectangular voltage state.
//! - [`powerflow`]: Newton power-flow solver in rectangular coordinates plus
//!   analytic voltage/loss sensitivities obtained from the inverse function
//!   theorem.
//! - [`policy`]: the feed-forward control policy with a scaled-tanh output
//!   layer that keeps setpoints inside the inverter capability set, its
//!   reverse-mode gradients, and the Adam optimizer.
//! - [`scenarios`]: synthetic grid-condition datasets (load/solar profiles,
//!   noise replication, train/test splits, meter masks).
//! - [`training`]: the stochastic primal-dual trainers for the averaged and
//!   chance-constrained formulations, with analytic or gradient-free
//!   (zeroth-order) sensitivity estimates.
//! - [`evaluation`]: policy evaluation, the per-scenario projected-gradient
//!   OPF baseline, violation statistics, and timing comparisons.

pub mod data;
pub mod evaluation;
pub mod feeder;
pub mod policy;
pub mod powerflow;
pub mod scenarios;
pub mod training;


pub use feeder::{Bus, FeederModel, Line};

pub use powerflow::{GridConditions, PowerFlowSolution, Sensitivities};


