//! P3P-RANSAC pose baseline against a single map frame.
//!
//! Map pixels are lifted into 3D through their stored inverse depths, minimal
//! three-point hypotheses are solved with Grunert's distance equations (the
//! quartic is rooted through its companion matrix), consensus is scored by
//! reprojection, and the winner is polished with Gauss-Newton on its inliers.

use super::{FineError, MatchSet};
use crate::geom::{backproject, project, project_jacobian, skew, CameraIntrinsics, Pose, Twist};
use nalgebra::{DMatrix, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct RansacConfig {
    /// Reprojection inlier threshold, pixels.
    pub threshold_px: f64,
    pub iterations: usize,
    /// Seed of the deterministic hypothesis sampler.
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            threshold_px: 2.0,
            iterations: 500,
            seed: 0x9e3779b97f4a7c15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PnpResult {
    /// Query camera pose expressed in the map frame's camera coordinates.
    pub pose: Pose,
    pub inliers: usize,
    pub total: usize,
}

/// Estimate the query camera pose relative to the match set's map frame.
pub fn pnp_ransac(
    matches: &MatchSet,
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PnpResult, FineError> {
    let n = matches.correspondences.len();
    if n < 4 {
        return Err(FineError::TooFewMatches { got: n, min: 4 });
    }
    // lift map pixels into the map camera frame and query pixels to bearings
    let mut points = Vec::with_capacity(n);
    let mut bearings = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n);
    for c in &matches.correspondences {
        let p = backproject(k, &c.map_pixel, c.inv_depth)
            .map_err(|_| FineError::DegenerateGeometry)?;
        points.push(p);
        bearings.push(
            Vector3::new(
                (c.query_pixel.x - k.cx) / k.fx,
                (c.query_pixel.y - k.cy) / k.fy,
                1.0,
            )
            .normalize(),
        );
        pixels.push(c.query_pixel);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Pose)> = None;
    for _ in 0..cfg.iterations {
        let (i, j, l) = distinct_triple(&mut rng, n);
        let ps = [points[i], points[j], points[l]];
        let fs = [bearings[i], bearings[j], bearings[l]];
        for hyp in p3p_solutions(&ps, &fs) {
            let count = count_inliers(&hyp, &points, &pixels, k, cfg.threshold_px);
            if best.as_ref().is_none_or(|(c, _)| count > *c) {
                best = Some((count, hyp));
            }
        }
    }
    let (_, hyp) = best.ok_or(FineError::DegenerateGeometry)?;

    // final polish on the consensus set
    let inlier_idx: Vec<usize> = (0..n)
        .filter(|&i| reprojection_error(&hyp, &points[i], &pixels[i], k) < cfg.threshold_px)
        .collect();
    let pose = if inlier_idx.len() >= 4 {
        let ip: Vec<Vector3<f64>> = inlier_idx.iter().map(|&i| points[i]).collect();
        let ix: Vec<Vector2<f64>> = inlier_idx.iter().map(|&i| pixels[i]).collect();
        refine_pose(&ip, &ix, k, hyp, 20)
    } else {
        hyp
    };
    let inliers = (0..n)
        .filter(|&i| reprojection_error(&pose, &points[i], &pixels[i], k) < cfg.threshold_px)
        .count();
    Ok(PnpResult {
        pose,
        inliers,
        total: n,
    })
}

fn distinct_triple(rng: &mut ChaCha8Rng, n: usize) -> (usize, usize, usize) {
    let i = rng.gen_range(0..n);
    let mut j = rng.gen_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    loop {
        let l = rng.gen_range(0..n);
        if l != i && l != j {
            return (i, j, l);
        }
    }
}

fn reprojection_error(
    pose: &Pose,
    point_map: &Vector3<f64>,
    pixel: &Vector2<f64>,
    k: &CameraIntrinsics,
) -> f64 {
    let p_cam = pose.inverse().transform(point_map);
    let (px, valid) = project(k, &p_cam);
    if valid {
        (px - pixel).norm()
    } else {
        f64::INFINITY
    }
}

fn count_inliers(
    pose: &Pose,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
    threshold: f64,
) -> usize {
    points
        .iter()
        .zip(pixels)
        .filter(|(p, x)| reprojection_error(pose, p, x, k) < threshold)
        .count()
}

/// Grunert's three-point resection: camera poses (camera-to-map) consistent
/// with three map points and the unit bearings observing them.
pub(crate) fn p3p_solutions(points: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<Pose> {
    let a2 = (points[1] - points[2]).norm_squared();
    let b2 = (points[0] - points[2]).norm_squared();
    let c2 = (points[0] - points[1]).norm_squared();
    if a2 < 1e-12 || b2 < 1e-12 || c2 < 1e-12 {
        return Vec::new();
    }
    // collinear point triples admit a one-parameter family of poses
    let cross = (points[1] - points[0]).cross(&(points[2] - points[0]));
    if cross.norm_squared() < 1e-16 * b2 * c2 {
        return Vec::new();
    }
    let cos_a = bearings[1].dot(&bearings[2]);
    let cos_b = bearings[0].dot(&bearings[2]);
    let cos_g = bearings[0].dot(&bearings[1]);

    // quartic in v = s3 / s1 from the pairwise law-of-cosines equations
    let q1 = (a2 - c2) / b2;
    let q2 = (a2 + c2) / b2;
    let c4 = (q1 - 1.0).powi(2) - 4.0 * c2 / b2 * cos_a * cos_a;
    let c3 = 4.0
        * (q1 * (1.0 - q1) * cos_b - (1.0 - q2) * cos_a * cos_g
            + 2.0 * c2 / b2 * cos_a * cos_a * cos_b);
    let c2c = 2.0
        * (q1 * q1 - 1.0 + 2.0 * q1 * q1 * cos_b * cos_b + 2.0 * (b2 - c2) / b2 * cos_a * cos_a
            - 4.0 * q2 * cos_a * cos_b * cos_g
            + 2.0 * (b2 - a2) / b2 * cos_g * cos_g);
    let c1 = 4.0
        * (-q1 * (1.0 + q1) * cos_b + 2.0 * a2 / b2 * cos_g * cos_g * cos_b
            - (1.0 - q2) * cos_a * cos_g);
    let c0 = (1.0 + q1).powi(2) - 4.0 * a2 / b2 * cos_g * cos_g;

    let mut out = Vec::new();
    for v in quartic_real_roots(c4, c3, c2c, c1, c0) {
        if v <= 0.0 {
            continue;
        }
        let denom = 2.0 * (cos_g - v * cos_a);
        if denom.abs() < 1e-12 {
            continue;
        }
        let u = ((-1.0 + q1) * v * v - 2.0 * q1 * cos_b * v + 1.0 + q1) / denom;
        if u <= 0.0 {
            continue;
        }
        let s1sq = b2 / (1.0 + v * v - 2.0 * v * cos_b);
        if !(s1sq > 0.0) {
            continue;
        }
        let s1 = s1sq.sqrt();
        let s2 = u * s1;
        let s3 = v * s1;
        // reject roots of a mis-conditioned quartic by re-checking all three
        // distance equations
        let scale = a2 + b2 + c2;
        let e1 = s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * cos_a - a2;
        let e2 = s1 * s1 + s3 * s3 - 2.0 * s1 * s3 * cos_b - b2;
        let e3 = s1 * s1 + s2 * s2 - 2.0 * s1 * s2 * cos_g - c2;
        if e1.abs() + e2.abs() + e3.abs() > 1e-6 * scale {
            continue;
        }
        let cam = [s1 * bearings[0], s2 * bearings[1], s3 * bearings[2]];
        if let Some(map_to_cam) = kabsch(points, &cam) {
            out.push(map_to_cam.inverse());
        }
    }
    out
}

/// Real roots of `c4 x^4 + c3 x^3 + c2 x^2 + c1 x + c0`, via the eigenvalues
/// of the companion matrix of the monic polynomial.
fn quartic_real_roots(c4: f64, c3: f64, c2: f64, c1: f64, c0: f64) -> Vec<f64> {
    let lead = c4.abs().max(c3.abs()).max(c2.abs()).max(c1.abs()).max(c0.abs());
    if lead == 0.0 || c4.abs() < 1e-14 * lead {
        return Vec::new();
    }
    let a3 = c3 / c4;
    let a2 = c2 / c4;
    let a1 = c1 / c4;
    let a0 = c0 / c4;
    let companion = DMatrix::from_row_slice(
        4,
        4,
        &[
            0.0, 0.0, 0.0, -a0, //
            1.0, 0.0, 0.0, -a1, //
            0.0, 1.0, 0.0, -a2, //
            0.0, 0.0, 1.0, -a3,
        ],
    );
    // cap the Schur iterations: degenerate geometry can produce companion
    // matrices on which an uncapped QR iteration never converges
    let Some(schur) = nalgebra::linalg::Schur::try_new(companion, 1e-12, 500) else {
        return Vec::new();
    };
    schur
        .complex_eigenvalues()
        .iter()
        .filter(|e| e.im.abs() < 1e-8 * (1.0 + e.re.abs()))
        .map(|e| e.re)
        .collect()
}

/// Least-squares rigid alignment `q ~= R p + t` over paired point sets.
fn kabsch(p: &[Vector3<f64>; 3], q: &[Vector3<f64>; 3]) -> Option<Pose> {
    let pc = (p[0] + p[1] + p[2]) / 3.0;
    let qc = (q[0] + q[1] + q[2]) / 3.0;
    let mut h = Matrix3::zeros();
    for i in 0..3 {
        h += (p[i] - pc) * (q[i] - qc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let mut d = Matrix3::identity();
    d[(2, 2)] = (vt.transpose() * u.transpose()).determinant().signum();
    let r = vt.transpose() * d * u.transpose();
    let t = qc - r * pc;
    Some(Pose::from_rotation_matrix(&r, t))
}

/// Gauss-Newton polish of a camera pose over fixed 3D points.
pub(crate) fn refine_pose(
    points_map: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
    init: Pose,
    max_iters: usize,
) -> Pose {
    let mut pose = init;
    for _ in 0..max_iters {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        let inv = pose.inverse();
        for (p, x) in points_map.iter().zip(pixels) {
            let p_cam = inv.transform(p);
            if p_cam.z <= 0.05 {
                continue;
            }
            let (px, _) = project(k, &p_cam);
            let r = x - px;
            // right perturbation of the camera pose moves the camera-frame
            // point by -(rho + phi x p), so d r / d xi = j_px * [I | -skew]
            let j_px = project_jacobian(k, &p_cam);
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&j_px);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-j_px * skew(&p_cam)));
            h += j.transpose() * j;
            g -= j.transpose() * r;
        }
        for i in 0..6 {
            h[(i, i)] += 1e-12;
        }
        let Some(chol) = h.cholesky() else { break };
        let step = chol.solve(&g);
        pose = pose.retract(&Twist::from_slice(step.as_slice()));
        if step.norm() < 1e-14 {
            break;
        }
    }
    pose
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fineloc::Correspondence;
    use crate::geom::se3_exp;
    use rand::Rng;

    fn k_test() -> CameraIntrinsics {
        CameraIntrinsics::new(60.0, 60.0, 32.0, 32.0, 64, 64)
    }

    /// A camera with realistic resolution, for statistical accuracy checks
    /// where per-pixel noise must not dominate.
    fn k_big() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, 320.0, 320.0, 640, 640)
    }

    fn random_pose(rng: &mut ChaCha8Rng, trans: f64, rot: f64) -> Pose {
        let rho = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * trans;
        let phi = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * rot;
        se3_exp(&Twist::new(rho, phi))
    }

    /// Correspondences consistent with `query_pose` (camera-to-map-frame),
    /// with optional pixel noise and outliers.
    fn synth_matches(
        query_pose: &Pose,
        k: &CameraIntrinsics,
        n: usize,
        pixel_sigma: f64,
        outlier_fraction: f64,
        rng: &mut ChaCha8Rng,
    ) -> MatchSet {
        let (w, h) = (k.width as f64, k.height as f64);
        let inv = query_pose.inverse();
        let mut cs = Vec::new();
        let mut attempts = 0;
        while cs.len() < n && attempts < 100 * n {
            attempts += 1;
            let map_pixel = Vector2::new(rng.gen_range(2.0..w - 2.0), rng.gen_range(2.0..h - 2.0));
            let depth = rng.gen_range(4.0..20.0);
            let p = backproject(k, &map_pixel, 1.0 / depth).unwrap();
            let p_cam = inv.transform(&p);
            let (px, valid) = project(k, &p_cam);
            if !valid {
                continue;
            }
            let query_pixel = if rng.gen_bool(outlier_fraction) {
                Vector2::new(rng.gen_range(0.0..w), rng.gen_range(0.0..h))
            } else {
                px + Vector2::new(
                    crate::simworld::sensors::gauss(rng) * pixel_sigma,
                    crate::simworld::sensors::gauss(rng) * pixel_sigma,
                )
            };
            cs.push(Correspondence {
                map_pixel,
                query_pixel,
                inv_depth: 1.0 / depth,
            });
        }
        MatchSet {
            map_frame_id: 0,
            map_pose: Pose::identity(),
            correspondences: cs,
        }
    }

    #[test]
    fn minimal_solver_recovers_the_generating_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = k_test();
        for _ in 0..50 {
            let pose = random_pose(&mut rng, 0.5, 0.2);
            let m = synth_matches(&pose, &k, 3, 0.0, 0.0, &mut rng);
            if m.correspondences.len() < 3 {
                continue;
            }
            let points: Vec<Vector3<f64>> = m
                .correspondences
                .iter()
                .map(|c| backproject(&k, &c.map_pixel, c.inv_depth).unwrap())
                .collect();
            let bearings: Vec<Vector3<f64>> = m
                .correspondences
                .iter()
                .map(|c| {
                    Vector3::new(
                        (c.query_pixel.x - k.cx) / k.fx,
                        (c.query_pixel.y - k.cy) / k.fy,
                        1.0,
                    )
                    .normalize()
                })
                .collect();
            let sols = p3p_solutions(
                &[points[0], points[1], points[2]],
                &[bearings[0], bearings[1], bearings[2]],
            );
            let hit = sols.iter().any(|s| {
                (s.translation() - pose.translation()).norm() < 1e-6
                    && s.inverse().compose(&pose).rotation_angle() < 1e-6
            });
            assert!(hit, "no solution matched among {}", sols.len());
        }
    }

    #[test]
    fn noise_free_matches_give_exact_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = k_test();
        let cfg = RansacConfig::default();
        for _ in 0..10 {
            let pose = random_pose(&mut rng, 0.5, 0.2);
            let m = synth_matches(&pose, &k, 64, 0.0, 0.0, &mut rng);
            let r = pnp_ransac(&m, &k, &cfg).unwrap();
            assert!((r.pose.translation() - pose.translation()).norm() < 1e-6);
            assert!(r.pose.inverse().compose(&pose).rotation_angle() < 1e-8);
            assert_eq!(r.inliers, r.total);
        }
    }

    #[test]
    fn survives_thirty_percent_outliers_with_pixel_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let k = k_big();
        let cfg = RansacConfig::default();
        let mut errors = Vec::new();
        for _ in 0..100 {
            let pose = random_pose(&mut rng, 0.5, 0.2);
            let m = synth_matches(&pose, &k, 64, 1.0, 0.3, &mut rng);
            let r = pnp_ransac(&m, &k, &cfg).unwrap();
            errors.push((r.pose.translation() - pose.translation()).norm());
            assert!(r.inliers <= r.total);
        }
        errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p95 = errors[94];
        assert!(p95 < 0.2, "95th percentile translation error {p95}");
    }

    #[test]
    fn too_few_matches_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let k = k_test();
        let pose = random_pose(&mut rng, 0.3, 0.1);
        let m = synth_matches(&pose, &k, 3, 0.0, 0.0, &mut rng);
        assert!(matches!(
            pnp_ransac(&m, &k, &RansacConfig::default()),
            Err(FineError::TooFewMatches { got: 3, min: 4 })
        ));
    }

    #[test]
    fn collinear_geometry_is_reported_degenerate() {
        // all points on one ray through the camera center: every minimal set
        // is degenerate
        let k = k_test();
        let cs: Vec<Correspondence> = (0..8)
            .map(|i| Correspondence {
                map_pixel: Vector2::new(32.0, 32.0),
                query_pixel: Vector2::new(32.0, 32.0),
                inv_depth: 1.0 / (2.0 + i as f64),
            })
            .collect();
        let m = MatchSet {
            map_frame_id: 0,
            map_pose: Pose::identity(),
            correspondences: cs,
        };
        assert!(matches!(
            pnp_ransac(&m, &k, &RansacConfig::default()),
            Err(FineError::DegenerateGeometry)
        ));
    }

    #[test]
    fn consistent_depth_scaling_shifts_the_pose_by_the_predicted_amount() {
        // scaling every depth by (1 + ds) scales the lifted scene, so the
        // recovered camera position scales by the same factor
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let k = k_test();
        let cfg = RansacConfig::default();
        let ds = 0.1;
        let pose = Pose::new(
            nalgebra::UnitQuaternion::identity(),
            Vector3::new(1.0, 0.5, -10.0),
        );
        let m = synth_matches(&pose, &k, 64, 0.0, 0.0, &mut rng);
        let scaled = MatchSet {
            correspondences: m
                .correspondences
                .iter()
                .map(|c| Correspondence {
                    inv_depth: c.inv_depth / (1.0 + ds),
                    ..*c
                })
                .collect(),
            ..m
        };
        // widen the inlier gate: the scaled problem is still self-consistent
        let wide = RansacConfig {
            threshold_px: 50.0,
            ..cfg
        };
        let r = pnp_ransac(&scaled, &k, &wide).unwrap();
        let shift = (r.pose.translation() - pose.translation()).norm();
        let predicted = ds * pose.translation().norm();
        assert!(
            shift > 0.5 * predicted && shift < 2.0 * predicted,
            "shift {shift} vs predicted {predicted}"
        );
    }
}
