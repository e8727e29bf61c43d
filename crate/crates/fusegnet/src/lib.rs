//! Foot ulcer segmentation toolkit.
//!
//! Builds an encoder-decoder segmentation network whose decoder stages fuse a
//! parallel spatial/channel squeeze-and-excitation module, trains it with a
//! dice+focal objective under a plateau schedule, runs k-fold ensemble
//! inference, and evaluates predictions with data-based and image-based
//! metrics plus boundary-accuracy scoring.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod attention;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod plots;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
