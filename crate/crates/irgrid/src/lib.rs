//! File formats, corpus handling and the command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod corpus;
pub mod pool;
pub mod render;
