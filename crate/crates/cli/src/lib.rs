//! Library surface of the experiment runner, exposed for integration tests.

pub mod cmds;
pub mod config;
pub mod output;
pub mod runner;
