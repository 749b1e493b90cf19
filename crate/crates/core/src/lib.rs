//! Weather-aware gated camera/LiDAR fusion for 3D semantic occupancy.

pub mod encoders;
pub mod envgate;
pub mod error;
pub mod grid;
pub mod headloss;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod scenegen;

pub use error::{Error, Result};
