//! Differentiable multi-agent inverted-pendulum simulation.
//!
//! Each agent is reduced to an inverted pendulum on a planar cart. Balance
//! recovery comes from a PD controller plus learned residual forces, agents
//! push on each other through an elliptical repulsive potential, and the
//! whole rollout is recorded on a reverse-mode tape so physical parameters
//! and network weights can be fitted to observed trajectories.

pub mod autodiff;
pub mod cli;
pub mod controllers;
pub mod error;
pub mod gradcheck;
pub mod interaction;
pub mod io;
pub mod ipm;
pub mod models;
pub mod nn;
pub mod rng;
pub mod scenarios;
pub mod sim;
pub mod skeleton;
pub mod training;

pub use error::{Error, Result};
