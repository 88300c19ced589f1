//! Static IR-drop analysis core.
//!
//! Everything here is pure computation over in-memory data and builds without
//! `std` (with `alloc`). File formats, the CLI and rendering live in the
//! `irgrid` crate.
#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;

pub mod error;
pub mod explain;
pub mod featurize;
pub mod grid;
pub mod model;
pub mod netlist;
pub mod nn;
pub mod solver;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
