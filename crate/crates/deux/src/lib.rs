//! Depth-uncertainty-guided exploration (DEUX) testbed.
//!
//! A self-contained stack for studying how exploration policies affect the
//! quality of data collected for unsupervised depth completion:
//!
//! - [`geometry`]: pinhole camera, SE(3) poses, and the differentiable
//!   image-reconstruction warp.
//! - [`losses`]: the unsupervised depth-completion objective (color,
//!   structural, smoothness, and sparse-depth terms), its analytic gradient,
//!   and the photometric uncertainty residual.
//! - [`world`]: procedural voxel indoor scenes, a DDA raycasting RGB-D
//!   renderer, and a discrete-action embodied agent.
//! - [`mapping`]: depth-to-occupancy integration, frontier extraction, and
//!   the planning-view map transform.
//! - [`planning`]: A* on the processed grid plus waypoint-to-action logic.
//! - [`policies`]: Random, Frontier, Oracle, and DEUX exploration policies.
//! - [`completion`]: Harris-corner sparse depth sampling, a classical
//!   parametric depth completor fitted with the unsupervised loss, and the
//!   MAE/RMSE/iMAE/iRMSE metrics.
//! - [`pipeline`]: episode orchestration, dataset serialization, the
//!   four-policy benchmark harness, and trajectory plots.
//! - [`cli`]: the `deux` command-line entry point.

pub mod cli;
pub mod completion;
pub mod config;
pub mod geometry;
pub mod losses;
pub mod mapping;
pub mod pipeline;
pub mod planning;
pub mod policies;
pub mod world;
