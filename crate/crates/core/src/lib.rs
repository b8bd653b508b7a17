//! Distributed model predictive control for multiple manipulators sharing a workspace.

pub mod collision;
pub mod comms;
pub mod config;
pub mod coordinator;
pub mod dynamics;
pub mod error;
pub mod game;
pub mod kinematics;
pub mod ocp;
pub mod sim;

pub use error::{Error, Result};
