//! Synthetic front-end providers. These stand in for learned dense-flow and
//! feature-matching networks: they compute exact answers from ground truth,
//! then inject configurable noise and outliers.

use super::sensors::gauss;
use crate::dba::{rigid_flow, DbaError, FlowField, InverseDepthGrid};
use crate::geom::{backproject, project, CameraIntrinsics, Pose};
use nalgebra::Vector2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowProviderConfig {
    /// Per-axis flow measurement noise, pixels.
    pub pixel_sigma: f64,
    /// Fraction of cells replaced by gross outlier flow.
    pub outlier_fraction: f64,
    /// Weight reported for outlier cells. A small value models a front end
    /// that knows it is unsure; a value at or above the inlier weight models
    /// confidently wrong flow.
    pub outlier_weight: f64,
}

impl Default for FlowProviderConfig {
    fn default() -> Self {
        FlowProviderConfig {
            pixel_sigma: 0.1,
            outlier_fraction: 0.0,
            outlier_weight: 1e-2,
        }
    }
}

fn inlier_weight(pixel_sigma: f64) -> f64 {
    if pixel_sigma > 0.0 {
        1.0 / (pixel_sigma * pixel_sigma)
    } else {
        1.0
    }
}

/// Residual flow of the source grid into the target view: the true
/// correspondence (from ground-truth poses and depth) minus the rigid
/// prediction at the current estimates, plus noise. This is exactly the
/// residual the dense-alignment linearization expects as its measurement.
#[allow(clippy::too_many_arguments)]
pub fn flow_provider(
    est_i: &Pose,
    est_j: &Pose,
    est_lam_i: &InverseDepthGrid,
    gt_i: &Pose,
    gt_j: &Pose,
    gt_lam_i: &InverseDepthGrid,
    k: &CameraIntrinsics,
    cfg: &FlowProviderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FlowField, DbaError> {
    let (meas, meas_valid) = rigid_flow(gt_i, gt_j, gt_lam_i, k)?;
    let (pred, pred_valid) = rigid_flow(est_i, est_j, est_lam_i, k)?;
    let mut field = FlowField::zeros(est_lam_i.rows(), est_lam_i.cols());
    let w_in = inlier_weight(cfg.pixel_sigma);
    for cell in 0..field.len() {
        if !(meas_valid[cell] && pred_valid[cell]) {
            field.valid[cell] = false;
            field.weight[cell] = Vector2::zeros();
            continue;
        }
        let is_outlier =
            cfg.outlier_fraction > 0.0 && rng.gen_range(0.0..1.0) < cfg.outlier_fraction;
        if is_outlier {
            field.flow[cell] =
                Vector2::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
            field.weight[cell] = Vector2::new(cfg.outlier_weight, cfg.outlier_weight);
        } else {
            let mut r = meas[cell] - pred[cell];
            if cfg.pixel_sigma > 0.0 {
                r += Vector2::new(gauss(rng), gauss(rng)) * cfg.pixel_sigma;
            }
            field.flow[cell] = r;
            field.weight[cell] = Vector2::new(w_in, w_in);
        }
    }
    Ok(field)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherConfig {
    /// Query-pixel localization noise, pixels.
    pub pixel_sigma: f64,
    /// Fraction of matches replaced by uniform wrong correspondences.
    pub outlier_fraction: f64,
    pub matches_per_pair: usize,
    /// Relative depth scale error of the reported map depths: the reported
    /// inverse depth is `lambda_true / (1 + depth_scale_error)`.
    pub depth_scale_error: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            pixel_sigma: 0.3,
            outlier_fraction: 0.0,
            matches_per_pair: 48,
            depth_scale_error: 0.0,
        }
    }
}

/// Feature correspondence from a stored map keyframe into a query image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    /// Pixel in the map keyframe, at a depth-grid cell center.
    pub map_pixel: Vector2<f64>,
    /// Inverse depth the map reports at that pixel (possibly scale-biased).
    pub inv_depth: f64,
    /// Matched pixel in the query image.
    pub query_pixel: Vector2<f64>,
    pub outlier: bool,
}

/// Match map grid-cell centers into the query view using true geometry, then
/// corrupt per the config. Both poses are camera-to-world ground truth; the
/// returned matches are what the estimator gets to see.
pub fn matcher_provider(
    map_cam: &Pose,
    query_cam: &Pose,
    map_lam: &InverseDepthGrid,
    k: &CameraIntrinsics,
    cfg: &MatcherConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Match> {
    let t_qm = query_cam.inverse().compose(map_cam);
    let mut matches = Vec::new();
    let mut attempts = 0;
    while matches.len() < cfg.matches_per_pair && attempts < cfg.matches_per_pair * 20 {
        attempts += 1;
        let row = rng.gen_range(0..map_lam.rows());
        let col = rng.gen_range(0..map_lam.cols());
        let pix = k.grid_pixel(row, col);
        let lam = map_lam.get(row, col);
        let p_map = match backproject(k, &pix, lam) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let p_query = t_qm.transform(&p_map);
        let (u, ok) = project(k, &p_query);
        if !ok {
            continue;
        }
        let is_outlier =
            cfg.outlier_fraction > 0.0 && rng.gen_range(0.0..1.0) < cfg.outlier_fraction;
        let query_pixel = if is_outlier {
            Vector2::new(
                rng.gen_range(0.0..k.width as f64),
                rng.gen_range(0.0..k.height as f64),
            )
        } else if cfg.pixel_sigma > 0.0 {
            u + Vector2::new(gauss(rng), gauss(rng)) * cfg.pixel_sigma
        } else {
            u
        };
        matches.push(Match {
            map_pixel: pix,
            inv_depth: lam / (1.0 + cfg.depth_scale_error),
            query_pixel,
            outlier: is_outlier,
        });
    }
    matches
}
