//! Density of states of incommensurate bilayer tight-binding lattices.
//!
//! Two independent estimators are provided: a real-space method that averages
//! kernel-polynomial local densities over relative layer shifts, and a
//! momentum-space method that restricts the coupled Bloch-wave Hamiltonian to
//! energy-adaptive degree-of-freedom sets.

pub mod cli;
pub mod config;
pub mod curve;
pub mod error;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod momentum;
pub mod monolayer;
pub mod realspace;
pub mod region;
pub mod study;
pub mod tb_model;

pub use error::{Error, Result};
