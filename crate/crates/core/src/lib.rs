//! Direct data-driven design of hierarchical controllers for LPV plants.
//!
//! An inner model-reference controller is identified from open-loop data
//! ([`inner_synth`]), its closed loop with the reference model is realized as
//! an augmented state-space model ([`realization`]), and an outer MPC
//! reference governor ([`mpc`], solved by [`qp`]) shapes the reference fed to
//! the inner loop so input and output constraints hold.

pub mod cli;
pub mod closed_loop;
pub mod config;
pub mod inner_synth;
pub mod metrics;
pub mod mpc;
pub mod plant_lab;
pub mod qp;
pub mod realization;
pub mod refmodel;
pub mod signals;
pub mod state_estimator;
