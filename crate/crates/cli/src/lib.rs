//! Configuration, checkpoints, corpora and the training and evaluation
//! drivers behind the `uwkit` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod train;
