//! Deterministic CPU inference for voxel-based LiDAR 3D detectors and a
//! cost-aware benchmark harness around them.
//!
//! The crate covers the full pipeline: binary point-cloud ingestion,
//! voxelization, a sparse 3D convolutional backbone, bird's-eye-view
//! projection, a dense 2D backbone, anchor- and center-based detection
//! heads with rotated-box NMS, AP/APH evaluation, and latency/parameter/
//! FLOP profiling with Pareto reports.
//!
//! All numeric paths are bit-reproducible: weights are synthesized from a
//! pinned PRNG, accumulation orders are fixed, and outputs do not depend on
//! the number of worker threads.

pub mod archspec;
pub mod costbench;
pub mod heads;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod pointcloud;
pub mod rng;
pub mod runtime;
