//! Simulated operant-training rig: cameras, audio, a microcontroller link,
//! trial logic, archiving and statistics.

pub mod analytics;
pub mod archive;
pub mod audio;
pub mod bus;
pub mod hwlink;
pub mod pgm;
pub mod rigsim;
pub mod schema;
pub mod session;
pub mod vision;
