//! Perspective-aware face inversion from landmarks and portrait distance
//! correction.
//!
//! The library fits a linear 3D landmark face model, a camera pose, the
//! camera-to-face distance and the focal length to observed 2D landmarks of
//! a close-up portrait, then re-renders the portrait from a virtual camera
//! placed further away with a focal length that keeps the face the same size.

pub mod config;
pub mod error;
pub mod facemodel;
pub mod geometry;
pub mod image;
pub mod io;
pub mod landmarks;
pub mod metrics;
pub mod objective;
pub mod scene;
pub mod solver;
pub mod synth;
pub mod tps;
pub mod warpstitch;

pub use error::{Error, Result};
