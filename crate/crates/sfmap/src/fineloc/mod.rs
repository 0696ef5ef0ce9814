//! Fine pose estimation against retrieved map frames.
//!
//! Given one or more retrieved structure frames and pixel correspondences
//! between query images and those frames, this module estimates the query
//! camera poses. Two estimators are provided: a P3P-RANSAC baseline that
//! solves each query against a single frame, and a multi-frame factor graph
//! that fuses reprojection constraints from several queries with odometry
//! relatives and per-point depth priors, with map-frame poses held fixed.

mod graph;
mod pnp;

pub use graph::{build_fine_graph, solve_fine, FineProblem, MapReprojectionFactor};
pub use pnp::{pnp_ransac, PnpResult, RansacConfig};

use crate::fgraph::NoiseModel;
use crate::geom::Pose;
use nalgebra::Vector2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FineError {
    #[error("{got} correspondences, at least {min} required")]
    TooFewMatches { got: usize, min: usize },
    #[error("no usable minimal set found (degenerate correspondence geometry)")]
    DegenerateGeometry,
    #[error("{got} odometry relatives for {queries} queries, expected {expected}")]
    MissingOdometry {
        queries: usize,
        expected: usize,
        got: usize,
    },
    #[error("fine solver diverged")]
    SolverDiverged,
}

/// One pixel correspondence between a map frame and a query image, with the
/// inverse depth sampled from the map frame's depth grid.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub map_pixel: Vector2<f64>,
    pub query_pixel: Vector2<f64>,
    /// Inverse depth of the map pixel, 1/meters; must be positive.
    pub inv_depth: f64,
}

/// All correspondences between one query image and one map frame.
#[derive(Debug, Clone)]
pub struct MatchSet {
    pub map_frame_id: u64,
    /// Map camera pose in the world frame; a fixed anchor for the solve.
    pub map_pose: Pose,
    pub correspondences: Vec<Correspondence>,
}

/// One query image entering the multi-frame solve: an initial pose guess
/// and zero or more match sets against retrieved frames. A query without
/// match sets is still carried by odometry.
#[derive(Debug, Clone)]
pub struct QueryObservation {
    pub timestamp: f64,
    pub initial_pose: Pose,
    pub match_sets: Vec<MatchSet>,
}

/// Weights of the multi-frame estimation cost.
#[derive(Debug, Clone)]
pub struct FineConfig {
    /// Whitening of the odometry relative between consecutive queries.
    pub odom_noise: NoiseModel,
    /// Relative sigma of the per-point inverse-depth prior (sigma at a point
    /// with prior lambda is `depth_relative_sigma * lambda`).
    pub depth_relative_sigma: f64,
    /// Pixel sigma of the reprojection residual.
    pub pixel_sigma: f64,
    /// Cauchy scale of the robust reprojection loss, whitened pixels.
    pub cauchy_pixels: f64,
}

impl Default for FineConfig {
    fn default() -> Self {
        FineConfig {
            odom_noise: NoiseModel::from_sigmas(&[0.02, 0.02, 0.02, 0.005, 0.005, 0.005]),
            depth_relative_sigma: 0.1,
            pixel_sigma: 1.0,
            cauchy_pixels: 2.0,
        }
    }
}

/// Output of the multi-frame solve.
#[derive(Debug, Clone)]
pub struct FinePoseResult {
    /// One estimated camera pose per query, in input order.
    pub poses: Vec<Pose>,
    /// Correspondences per query whose whitened reprojection residual stayed
    /// below 3 after the solve.
    pub inliers: Vec<usize>,
    pub total_correspondences: usize,
    pub final_cost: f64,
    pub converged: bool,
}

/// First-order position error predicted from a consistent relative depth
/// error `scale_err` at a query-to-frame distance `recall_dist`: scaling the
/// scene scales the recovered baseline with it.
pub fn depth_error_bound(scale_err: f64, recall_dist: f64) -> f64 {
    scale_err * recall_dist
}
