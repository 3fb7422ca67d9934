//! Self-supervised lane detection from LiDAR-derived pseudo labels.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`extract`] pulls lane markings out of a LiDAR sweep (ground
//!    segmentation, intensity threshold, DBSCAN, instance merging, RANSAC)
//!    and projects them into the camera as noisy pseudo labels.
//! 2. [`slc`] trains a lane-correction network that takes the image plus a
//!    rasterized label clue and learns, from two perturbed views of the same
//!    clue, to output consistent corrected lanes.
//! 3. [`distill`] refines labels with that network and trains an image-only
//!    student detector.
//! 4. [`metrics`] scores lanes with the TuSimple protocol.
//!
//! [`synthworld`] generates deterministic road scenes with ground truth so
//! every stage can be checked end to end.

pub mod config;
pub mod distill;
pub mod error;
pub mod extract;
pub mod formats;
pub mod geometry;
pub mod labelkit;
pub mod lanenet;
pub mod metrics;
pub mod raster;
pub mod rng;
pub mod slc;
pub mod synthworld;

pub use error::{Error, Result};
