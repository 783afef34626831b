//! Conflict-aware gradient filtering for multilingual preference alignment.

pub mod analysis;
pub mod config;
pub mod consensus;
pub mod error;
pub mod filtering;
pub mod formats;
pub mod grad_store;
pub mod lowrank;
pub mod preference;
pub mod runner;
pub mod seed;
pub mod selfloop;

pub use error::{CongradError, Result};
