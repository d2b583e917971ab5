//! Desk-scale bird's-eye-view semantic mapping laboratory.
//!
//! Sensor data is encoded into a low-resolution BEV feature grid, fused and
//! enhanced there, then learnably restored to high resolution for decoding.
//! An analytic cost model accounts for why restoration-last architectures
//! keep training memory flat as the network grows.

pub mod bevgrid;
pub mod costmodel;
pub mod error;
pub mod harness;
pub mod restore;
pub mod scenegen;
pub mod sensors;
pub mod tensorcore;

pub use error::{Error, Result};
