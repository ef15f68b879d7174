//! Low-light RAW denoising benchmark toolkit.
//!
//! The crate covers the full loop used to build and score camera-agnostic RAW
//! denoisers: Bayer frame handling and the RAWB container, sensor profile
//! calibration from dark frames, physics-based noisy/clean pair synthesis,
//! variance-stabilizing transforms, a classical baseline denoiser, a basic ISP,
//! RAW-domain fidelity metrics, the leaderboard ranking protocol and model
//! efficiency accounting.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod budget;
pub mod calibration;
pub mod denoise;
pub mod error;
pub mod harness;
pub mod isp;
pub mod metrics;
pub mod ranking;
pub mod raw;
pub mod rawb;
pub mod stats;
pub mod synth;
pub mod transforms;

pub use error::{Error, Result};
pub use raw::{Cfa, FrameMeta, PackedImage, RawFrame, Roi, SampleType, ValueSpace};
