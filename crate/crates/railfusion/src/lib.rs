//! Trajectory estimation for rail-constrained vehicles.
//!
//! The crate fuses IMU/odometer preintegration, LiDAR edge/planar features,
//! rail-track plane constraints, visual line and vanishing-point constraints
//! and GNSS fixes in a sliding-window factor graph, and ships a deterministic
//! synthetic rail-corridor simulator plus trajectory evaluation tooling used
//! to validate the estimator end to end.

pub mod fusion;
pub mod geom;
pub mod lidar;
pub mod preint;
pub mod rail;
pub mod vision;
