//! Multi-frame fine pose estimation as a factor graph.
//!
//! Query camera poses are variables; map-frame poses are constants baked
//! into the reprojection factors. Each matched map point carries its own
//! scalar inverse-depth variable held near the map's value by a prior, so
//! depth uncertainty propagates into the pose estimate instead of being
//! ignored. Reprojection residuals are Cauchy-robust; consecutive query
//! poses are tied by odometry relatives.

use super::{FineConfig, FineError, FinePoseResult, QueryObservation};
use crate::fgraph::{
    optimize, BetweenPoseFactor, Factor, Key, Linearization, NoiseModel, RobustLoss,
    ScalarPriorFactor, SolverOptions, Values, Variable,
};
use crate::geom::{project, project_jacobian, skew, CameraIntrinsics, Pose};
use nalgebra::{DMatrix, DVector, Vector2, Vector3};

/// Reprojection of one matched map point into one query image.
///
/// The point is lifted in the map camera at the current inverse-depth state,
/// moved to the world through the fixed map pose, and projected into the
/// query camera; the residual is `measured pixel - predicted pixel`.
pub struct MapReprojectionFactor {
    keys: [Key; 2],
    pub map_pose: Pose,
    pub map_pixel: Vector2<f64>,
    pub query_pixel: Vector2<f64>,
    pub camera: CameraIntrinsics,
    pub noise: NoiseModel,
    pub loss: RobustLoss,
}

impl MapReprojectionFactor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pose_key: Key,
        depth_key: Key,
        map_pose: Pose,
        map_pixel: Vector2<f64>,
        query_pixel: Vector2<f64>,
        camera: CameraIntrinsics,
        noise: NoiseModel,
        loss: RobustLoss,
    ) -> Self {
        assert_eq!(noise.dim(), 2);
        MapReprojectionFactor {
            keys: [pose_key, depth_key],
            map_pose,
            map_pixel,
            query_pixel,
            camera,
            noise,
            loss,
        }
    }

    /// Map-camera-frame ray of the map pixel at unit depth.
    fn ray(&self) -> Vector3<f64> {
        Vector3::new(
            (self.map_pixel.x - self.camera.cx) / self.camera.fx,
            (self.map_pixel.y - self.camera.cy) / self.camera.fy,
            1.0,
        )
    }

    /// Unwhitened residual and the camera-frame point it was computed at.
    fn raw_residual(&self, values: &Values) -> Result<(Vector2<f64>, Vector3<f64>, f64), FineError> {
        let pose = match values.get(self.keys[0]) {
            Some(v) => *v.as_pose(),
            None => return Err(FineError::SolverDiverged),
        };
        let lam = match values.get(self.keys[1]) {
            Some(v) => v.as_scalar(),
            None => return Err(FineError::SolverDiverged),
        };
        let lam = lam.max(1e-4);
        let p_map = self.ray() / lam;
        let p_world = self.map_pose.transform(&p_map);
        let mut p_cam = pose.inverse().transform(&p_world);
        // keep the projection finite when an iterate pushes the point near
        // the camera plane; the Cauchy loss bounds the resulting residual
        if p_cam.z < 0.05 {
            p_cam.z = 0.05;
        }
        let (px, _) = project(&self.camera, &p_cam);
        Ok((self.query_pixel - px, p_cam, lam))
    }

    /// Whitened (non-robust) residual norm, for inlier classification.
    pub fn whitened_error(&self, values: &Values) -> f64 {
        match self.raw_residual(values) {
            Ok((r, _, _)) => self
                .noise
                .whiten_vec(&DVector::from_column_slice(r.as_slice()))
                .norm(),
            Err(_) => f64::INFINITY,
        }
    }
}

impl Factor for MapReprojectionFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn linearize(
        &self,
        values: &Values,
    ) -> Result<Linearization, crate::fgraph::GraphError> {
        let (r, p_cam, lam) = self
            .raw_residual(values)
            .map_err(|_| crate::fgraph::GraphError::SolverDiverged)?;
        let j_px = project_jacobian(&self.camera, &p_cam);
        // right perturbation of the query pose moves the camera-frame point
        // by -(rho + phi x p), so d r / d xi = j_px * [I | -skew(p)]
        let mut j_pose = DMatrix::zeros(2, 6);
        j_pose.view_mut((0, 0), (2, 3)).copy_from(&j_px);
        j_pose
            .view_mut((0, 3), (2, 3))
            .copy_from(&(-j_px * skew(&p_cam)));
        // the lifted point scales as 1/lambda, so d p_cam / d lambda =
        // -R_q^T R_m ray / lambda^2; the residual flips the sign once more
        let pose = values.expect(self.keys[0])?.as_pose().clone();
        let dir = pose.rotation_matrix().transpose()
            * self.map_pose.rotation_matrix()
            * self.ray();
        let dp_dlam = -dir / (lam * lam);
        // residual is measured minus predicted, so the sign flips again
        let j_lam = DMatrix::from_column_slice(2, 1, (-(j_px * dp_dlam)).as_slice());
        let residual = DVector::from_column_slice(r.as_slice());
        Ok(finish(
            vec![j_pose, j_lam],
            residual,
            &self.noise,
            self.loss,
        ))
    }
}

/// Whiten and robust-weight a residual linearization (mirrors the engine's
/// internal convention).
fn finish(
    mut jacobians: Vec<DMatrix<f64>>,
    residual: DVector<f64>,
    noise: &NoiseModel,
    loss: RobustLoss,
) -> Linearization {
    let r = noise.whiten_vec(&residual);
    for j in jacobians.iter_mut() {
        *j = noise.whiten_mat(j);
    }
    let s = r.norm_squared();
    let w = loss.weight(s);
    let sw = w.sqrt();
    let r = r * sw;
    for j in jacobians.iter_mut() {
        *j *= sw;
    }
    Linearization::Residual {
        jacobians,
        residual: r,
        cost: 0.5 * loss.rho(s),
    }
}

/// Assembled multi-frame problem: variables, factors, and the bookkeeping
/// needed to report per-query inliers.
pub struct FineProblem {
    pub values: Values,
    odometry: Vec<BetweenPoseFactor>,
    depth_priors: Vec<ScalarPriorFactor>,
    /// Each reprojection factor tagged with its query index.
    reprojections: Vec<(usize, MapReprojectionFactor)>,
    n_queries: usize,
}

impl FineProblem {
    pub fn factor_count(&self) -> usize {
        self.odometry.len() + self.depth_priors.len() + self.reprojections.len()
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    fn all_factors(&self) -> Vec<&dyn Factor> {
        let mut fs: Vec<&dyn Factor> = Vec::with_capacity(self.factor_count());
        for f in &self.odometry {
            fs.push(f);
        }
        for f in &self.depth_priors {
            fs.push(f);
        }
        for (_, f) in &self.reprojections {
            fs.push(f);
        }
        fs
    }

    /// Total cost of the current values (robust, whitened).
    pub fn cost(&self) -> Result<f64, FineError> {
        let mut c = 0.0;
        for f in self.all_factors() {
            c += f
                .linearize(&self.values)
                .map_err(|_| FineError::SolverDiverged)?
                .cost();
        }
        Ok(c)
    }
}

/// Build the multi-frame problem from query observations and the odometry
/// relatives `T_i^-1 T_{i+1}` between consecutive queries.
pub fn build_fine_graph(
    queries: &[QueryObservation],
    odometry: &[Pose],
    camera: &CameraIntrinsics,
    cfg: &FineConfig,
) -> Result<FineProblem, FineError> {
    let n = queries.len();
    if n == 0 {
        return Err(FineError::TooFewMatches { got: 0, min: 1 });
    }
    if odometry.len() != n - 1 {
        return Err(FineError::MissingOdometry {
            queries: n,
            expected: n - 1,
            got: odometry.len(),
        });
    }
    let mut values = Values::new();
    let mut odom_factors = Vec::new();
    let mut depth_priors = Vec::new();
    let mut reprojections = Vec::new();
    let pixel_noise = NoiseModel::isotropic(2, cfg.pixel_sigma.max(1e-9));
    let loss = RobustLoss::cauchy(cfg.cauchy_pixels);
    let mut depth_id = 0u64;
    for (qi, q) in queries.iter().enumerate() {
        values.insert(Key::pose(qi as u64), Variable::Pose(q.initial_pose.clone()));
        for ms in &q.match_sets {
            for c in &ms.correspondences {
                let dkey = Key::scalar(depth_id);
                depth_id += 1;
                values.insert(dkey, Variable::Scalar(c.inv_depth));
                depth_priors.push(ScalarPriorFactor::new(
                    dkey,
                    c.inv_depth,
                    cfg.depth_relative_sigma * c.inv_depth,
                ));
                reprojections.push((
                    qi,
                    MapReprojectionFactor::new(
                        Key::pose(qi as u64),
                        dkey,
                        ms.map_pose.clone(),
                        c.map_pixel,
                        c.query_pixel,
                        *camera,
                        pixel_noise.clone(),
                        loss,
                    ),
                ));
            }
        }
    }
    for (i, rel) in odometry.iter().enumerate() {
        odom_factors.push(BetweenPoseFactor::new(
            Key::pose(i as u64),
            Key::pose(i as u64 + 1),
            rel.clone(),
            cfg.odom_noise.clone(),
        ));
    }
    Ok(FineProblem {
        values,
        odometry: odom_factors,
        depth_priors,
        reprojections,
        n_queries: n,
    })
}

/// Optimize the problem and report per-query poses and inlier counts.
pub fn solve_fine(problem: &mut FineProblem, opts: &SolverOptions) -> Result<FinePoseResult, FineError> {
    let mut values = std::mem::take(&mut problem.values);
    let report = {
        let factors = problem.all_factors();
        optimize(&factors, &mut values, opts)
    };
    problem.values = values;
    let report = report.map_err(|_| FineError::SolverDiverged)?;
    let mut poses = Vec::with_capacity(problem.n_queries);
    for qi in 0..problem.n_queries {
        poses.push(
            problem
                .values
                .expect(Key::pose(qi as u64))
                .map_err(|_| FineError::SolverDiverged)?
                .as_pose()
                .clone(),
        );
    }
    let mut inliers = vec![0usize; problem.n_queries];
    for (qi, f) in &problem.reprojections {
        if f.whitened_error(&problem.values) < 3.0 {
            inliers[*qi] += 1;
        }
    }
    // a tiny consensus means the robust loss explained the data away rather
    // than localizing; surface that as non-convergence instead of returning
    // a pose that fit a handful of outliers
    let total_inliers: usize = inliers.iter().sum();
    let consensus_ok =
        problem.reprojections.is_empty() || 4 * total_inliers >= problem.reprojections.len();
    Ok(FinePoseResult {
        poses,
        inliers,
        total_correspondences: problem.reprojections.len(),
        final_cost: report.final_cost,
        converged: report.converged && consensus_ok,
    })
}
