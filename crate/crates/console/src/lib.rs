//! Command line front end and HTTP API for the rig simulator.

pub mod api;
pub mod cli;
