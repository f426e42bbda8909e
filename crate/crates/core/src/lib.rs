//! Multi-agent LiDAR robustness toolkit: scene model, sensor corruptions,
//! teacher point clouds, BEV encoding with attention fusion, distillation
//! and reconstruction losses, and detection metrics.

pub mod corrupt;
pub mod distill;
pub mod encode;
pub mod error;
pub mod eval;
pub mod io;
pub mod pipeline;
pub mod recon;
pub mod rng;
pub mod scene;
pub mod teacher;

pub use error::{Error, Result};
pub use scene::{Agent, AgentId, BBox3D, PointCloud, Pose, Scene};
