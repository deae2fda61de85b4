//! Tightly-coupled LiDAR-inertial-visual state estimation with on-the-fly
//! radiance mapping, plus a deterministic synthetic-sensor simulator used as
//! ground truth by the test suites.
//!
//! The crate is `no_std`-compatible (with `alloc`); all file formats, the
//! pipeline driver and the CLI live in the companion `livo-pipeline` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod config;
pub mod filter;
pub mod imu;
pub mod lio;
pub mod manifold;
pub mod map;
pub mod photometric;
pub mod rng;
pub mod sim;
pub mod vio;

pub use config::PipelineConfig;
pub use manifold::{ErrorState, FullState, StateCovariance};
