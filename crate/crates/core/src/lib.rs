//! Post-fusion BEV feature stabilizer on a synthetic camera + LiDAR world.

pub mod config;
pub mod corruption;
pub mod curriculum;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod scene;
pub mod seeding;
pub mod voxel;

pub use error::{PfsError, Result};
pub mod host;
pub mod loss;
pub mod stabilizer;
