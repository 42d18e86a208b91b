//! Core algorithms for a desk-scale continual visual SLAM workbench.
//!
//! The crate is `no_std` + `alloc`: everything here is pure computation over
//! value types, so it can run embedded or be driven from the `clslam` CLI crate,
//! which adds file formats and orchestration on top.
//!
//! Module map:
//! - [`geometry`]: SE(3) poses, twists, pinhole projection, trajectories.
//! - [`photometric`]: view-synthesis warping and the self-supervised loss stack
//!   (reference, non-differentiable evaluation path).
//! - [`tape`]: a small reverse-mode autodiff engine over dense tensors.
//! - [`toynets`]: compact DepthNet/PoseNet, Adam, and the differentiable loss
//!   graph used for online adaptation.
//! - [`adaptation`]: dual-network (expert/generalizer) online adaptation with
//!   experience replay, frame gating, and the deployment hand-off protocol.
//! - [`backend`]: loop-closure detection and pose-graph optimization.
//! - [`metrics`]: segment errors plus adaptation/retention quality aggregates.
//! - [`simworld`]: deterministic procedural multi-environment scene generator.
//!
//! Conventions used throughout: camera frame is x-right, y-down, z-forward;
//! 6-vectors order the rotational part before the translational part;
//! `compose(a, b)` is the group product `a * b` (apply `b` in `a`'s frame).

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adaptation;
pub mod backend;
pub mod geometry;
pub(crate) mod kernels;
pub mod linalg;
pub mod metrics;
pub mod photometric;
pub mod rng;
pub mod simworld;
pub mod tape;
pub mod toynets;
