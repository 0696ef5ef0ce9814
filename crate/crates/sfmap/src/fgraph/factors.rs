//! Factor definitions for the nonlinear least-squares engine.
//!
//! A factor linearizes at the current values into one of two forms. Residual
//! factors expose whitened (and robust-weighted) Jacobians and residual;
//! quadratic factors expose a ready-made Hessian block and right-hand side,
//! which is how marginal priors and the pose constraints distilled from dense
//! bundle adjustment enter the graph.
//!
//! Sign conventions: residual factors minimize `0.5 * ||r||^2` with
//! `J = dr/ddelta`, contributing `J^T J` to the Hessian and `-J^T r` to the
//! right-hand side. Quadratic factors carry `cost(delta) = c - b^T delta +
//! 0.5 delta^T H delta`, so their right-hand-side contribution is `b`.

use super::noise::{NoiseModel, RobustLoss};
use super::preintegration::PreintegratedImu;
use super::values::{GraphError, Key, Values, Variable};
use crate::dba::DBAConstraint;
use crate::geom::{
    skew, so3_log, so3_right_jacobian, so3_right_jacobian_inv, Pose, Twist,
};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

/// Gravity in the world frame, m/s^2.
pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

/// Step used by all central-difference Jacobians in this module.
const FD_STEP: f64 = 1e-6;

/// Result of linearizing one factor at the current values.
pub enum Linearization {
    Residual {
        /// One Jacobian per key, each `rows x dim(key)`, whitened and scaled
        /// by the square root of the robust weight.
        jacobians: Vec<DMatrix<f64>>,
        /// Whitened, robust-scaled residual.
        residual: DVector<f64>,
        cost: f64,
    },
    Quadratic {
        /// Hessian over the stacked key tangents, in `keys()` order.
        h: DMatrix<f64>,
        /// Right-hand side over the stacked key tangents.
        b: DVector<f64>,
        cost: f64,
    },
}

impl Linearization {
    pub fn cost(&self) -> f64 {
        match self {
            Linearization::Residual { cost, .. } => *cost,
            Linearization::Quadratic { cost, .. } => *cost,
        }
    }
}

pub trait Factor {
    fn keys(&self) -> &[Key];
    fn linearize(&self, values: &Values) -> Result<Linearization, GraphError>;
}

/// Whiten, apply the robust loss and package a residual linearization.
fn finish_residual(
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

/// Central-difference Jacobians of a vector function of the keyed values.
pub(crate) fn numeric_jacobians<F>(
    values: &Values,
    keys: &[Key],
    eval: &F,
) -> Result<(DVector<f64>, Vec<DMatrix<f64>>), GraphError>
where
    F: Fn(&Values) -> Result<DVector<f64>, GraphError>,
{
    let r0 = eval(values)?;
    let mut jacs = Vec::with_capacity(keys.len());
    for &k in keys {
        let dim = values.expect(k)?.dim();
        let mut j = DMatrix::zeros(r0.len(), dim);
        let mut delta = vec![0.0; dim];
        for c in 0..dim {
            delta[c] = FD_STEP;
            let mut vp = values.clone();
            vp.get_mut(k).unwrap().retract(&delta);
            let rp = eval(&vp)?;
            delta[c] = -FD_STEP;
            let mut vm = values.clone();
            vm.get_mut(k).unwrap().retract(&delta);
            let rm = eval(&vm)?;
            delta[c] = 0.0;
            j.set_column(c, &((rp - rm) / (2.0 * FD_STEP)));
        }
        jacs.push(j);
    }
    Ok((r0, jacs))
}

/// Anchors a navigation state to a target value.
pub struct NavPriorFactor {
    keys: [Key; 1],
    pub target: super::values::NavState,
    pub noise: NoiseModel,
}

impl NavPriorFactor {
    pub fn new(key: Key, target: super::values::NavState, noise: NoiseModel) -> Self {
        assert_eq!(noise.dim(), 15);
        NavPriorFactor {
            keys: [key],
            target,
            noise,
        }
    }
}

impl Factor for NavPriorFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn linearize(&self, values: &Values) -> Result<Linearization, GraphError> {
        let target = self.target;
        let eval = move |v: &Values| -> Result<DVector<f64>, GraphError> {
            let n = v.expect(self.keys[0])?.as_nav();
            Ok(DVector::from_row_slice(&target.local(n)))
        };
        let (r, jacs) = numeric_jacobians(values, &self.keys, &eval)?;
        Ok(finish_residual(jacs, r, &self.noise, RobustLoss::None))
    }
}

/// Anchors the pose part of a state (nav or pose variable) to a target.
pub struct PosePriorFactor {
    keys: [Key; 1],
    pub target: Pose,
    pub noise: NoiseModel,
}

impl PosePriorFactor {
    pub fn new(key: Key, target: Pose, noise: NoiseModel) -> Self {
        assert_eq!(noise.dim(), 6);
        PosePriorFactor {
            keys: [key],
            target,
            noise,
        }
    }
}

impl Factor for PosePriorFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn linearize(&self, values: &Values) -> Result<Linearization, GraphError> {
        let target = self.target;
        let eval = move |v: &Values| -> Result<DVector<f64>, GraphError> {
            let p = v.expect(self.keys[0])?.as_pose();
            let t = target
                .local(p)
                .map_err(|_| GraphError::SolverDiverged)?;
            Ok(DVector::from_row_slice(&t.to_array()))
        };
        let (r, jacs) = numeric_jacobians(values, &self.keys, &eval)?;
        Ok(finish_residual(jacs, r, &self.noise, RobustLoss::None))
    }
}

/// Prior on a scalar variable.
pub struct ScalarPriorFactor {
    keys: [Key; 1],
    pub target: f64,
    pub sigma: f64,
}

impl ScalarPriorFactor {
    pub fn new(key: Key, target: f64, sigma: f64) -> Self {
        assert!(sigma > 0.0);
        ScalarPriorFactor {
            keys: [key],
            target,
            sigma,
        }
    }
}

impl Factor for ScalarPriorFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn linearize(&self, values: &Values) -> Result<Linearization, GraphError> {
        let x = values.expect(self.keys[0])?.as_scalar();
        let r = (x - self.target) / self.sigma;
        let j = DMatrix::from_element(1, 1, 1.0 / self.sigma);
        Ok(Linearization::Residual {
            jacobians: vec![j],
            residual: DVector::from_element(1, r),
            cost: 0.5 * r * r,
        })
    }
}

/// Relative-pose measurement between two states: `r = log(meas^-1 * (T_i^-1 T_j))`.
pub struct BetweenPoseFactor {
    keys: [Key; 2],
    pub measured: Pose,
    pub noise: NoiseModel,
    pub loss: RobustLoss,
}

impl BetweenPoseFactor {
    pub fn new(key_i: Key, key_j: Key, measured: Pose, noise: NoiseModel) -> Self {
        assert_eq!(noise.dim(), 6);
        BetweenPoseFactor {
            keys: [key_i, key_j],
            measured,
            noise,
            loss: RobustLoss::None,
        }
    }

    pub fn with_loss(mut self, loss: RobustLoss) -> Self {
        self.loss = loss;
        self
    }
}

impl Factor for BetweenPoseFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn linearize(&self, values: &Values) -> Result<Linearization, GraphError> {
        let measured = self.measured;
        let eval = move |v: &Values| -> Result<DVector<f64>, GraphError> {
            let pi = v.expect(self.keys[0])?.as_pose();
            let pj = v.expect(self.keys[1])?.as_pose();
            let rel = pi.inverse().compose(pj);
            let t = measured
                .local(&rel)
                .map_err(|_| GraphError::SolverDiverged)?;
            Ok(DVector::from_row_slice(&t.to_array()))
        };
        let (r, jacs) = numeric_jacobians(values, &self.keys, &eval)?;
        Ok(finish_residual(jacs, r, &self.noise, self.loss))
    }
}

/// Global position fix on the antenna point `p_b + R_b * lever`.
pub struct GnssFactor {
    keys: [Key; 1],
    pub measured: Vector3<f64>,
    pub lever: Vector3<f64>,
    pub noise: NoiseModel,
    pub loss: RobustLoss,
}

impl GnssFactor {
    pub fn new(key: Key, measured: Vector3<f64>, lever: Vector3<f64>, noise: NoiseModel) -> Self {
        assert_eq!(noise.dim(), 3);
        GnssFactor {
            keys: [key],
            measured,
            lever,
            noise,
            loss: RobustLoss::None,
        }
    }

    pub fn with_loss(mut self, loss: RobustLoss) -> Self {
        self.loss = loss;
        self
    }

    fn raw(&self, values: &Values) -> Result<(DVector<f64>, DMatrix<f64>), GraphError> {
        let var = values.expect(self.keys[0])?;
        let pose = var.as_pose();
        let rb = pose.rotation_matrix();
        let r = rb * self.lever + pose.translation() - self.measured;
        let mut j = DMatrix::zeros(3, var.dim());
        j.view_mut((0, 0), (3, 3)).copy_from(&rb);
        j.view_mut((0, 3), (3, 3)).copy_from(&(-rb * skew(&self.lever)));
        Ok((DVector::from_column_slice(r.as_slice()), j))
    }
}

impl Factor for GnssFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn linearize(&self, values: &Values) -> Result<Linearization, GraphError> {
        let (r, j) = self.raw(values)?;
        Ok(finish_residual(vec![j], r, &self.noise, self.loss))
    }
}

/// Inertial constraint between consecutive navigation states, built from a
/// preintegrated sample interval. Residual rows: [r_p, r_v, r_R, r_ba, r_bg].
pub struct ImuFactor {
    keys: [Key; 2],
    pub preint: PreintegratedImu,
    pub noise: NoiseModel,
}

impl ImuFactor {
    pub fn new(key_i: Key, key_j: Key, preint: PreintegratedImu) -> Result<Self, GraphError> {
        let noise = NoiseModel::from_covariance(&preint.covariance, 1e-12)
            .ok_or(GraphError::NotPositiveDefinite)?;
        Ok(ImuFactor {
            keys: [key_i, key_j],
            preint,
            noise,
        })
    }

    /// Unwhitened residual and Jacobians w.r.t. both 15-dim states.
    pub fn raw(
        &self,
        values: &Values,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>), GraphError> {
        let ni = *values.expect(self.keys[0])?.as_nav();
        let nj = *values.expect(self.keys[1])?.as_nav();
        let dt = self.preint.dt;
        if (nj.timestamp - ni.timestamp - dt).abs() > 1e-6 {
            return Err(GraphError::TimestampMismatch(format!(
                "state gap {} vs preintegrated {}",
                nj.timestamp - ni.timestamp,
                dt
            )));
        }
        let p = &self.preint;
        let rk = ni.pose.rotation_matrix();
        let rkt = rk.transpose();
        let rj = nj.pose.rotation_matrix();

        let delta_p = p.corrected_delta_p(&ni.bias_acc, &ni.bias_gyr);
        let delta_v = p.corrected_delta_v(&ni.bias_acc, &ni.bias_gyr);
        let delta_r = p.corrected_delta_r(&ni.bias_gyr);
        let delta_r_mat = delta_r.to_rotation_matrix().into_inner();

        let s_p = nj.pose.translation() - ni.pose.translation()
            - ni.velocity * dt
            - 0.5 * GRAVITY * dt * dt;
        let s_v = nj.velocity - ni.velocity - GRAVITY * dt;
        let r_p = rkt * s_p - delta_p;
        let r_v = rkt * s_v - delta_v;
        let err_rot = ni.pose.rotation().inverse() * nj.pose.rotation() * delta_r.inverse();
        let r_r = so3_log(&err_rot);
        let r_ba = nj.bias_acc - ni.bias_acc;
        let r_bg = nj.bias_gyr - ni.bias_gyr;

        let mut r = DVector::zeros(15);
        r.fixed_rows_mut::<3>(0).copy_from(&r_p);
        r.fixed_rows_mut::<3>(3).copy_from(&r_v);
        r.fixed_rows_mut::<3>(6).copy_from(&r_r);
        r.fixed_rows_mut::<3>(9).copy_from(&r_ba);
        r.fixed_rows_mut::<3>(12).copy_from(&r_bg);

        let jr_inv = so3_right_jacobian_inv(&r_r);
        let jr_inv_neg = so3_right_jacobian_inv(&-r_r);
        // bias chain for the rotation row: the gyro-bias correction enters
        // through Exp(J dbg), so its local slope at the current bias is
        // Jr(J dbg) J
        let dbg = ni.bias_gyr - p.bias_gyr;
        let j_tilde = so3_right_jacobian(&(p.dr_dbg * dbg)) * p.dr_dbg;

        let mut ji = DMatrix::zeros(15, 15);
        let mut jj = DMatrix::zeros(15, 15);
        let set = |m: &mut DMatrix<f64>, r0: usize, c0: usize, b: &Matrix3<f64>| {
            m.view_mut((r0, c0), (3, 3)).copy_from(b);
        };
        // r_p rows
        set(&mut ji, 0, 0, &(-Matrix3::identity()));
        set(&mut ji, 0, 3, &skew(&(rkt * s_p)));
        set(&mut ji, 0, 6, &(-rkt * dt));
        set(&mut ji, 0, 9, &(-p.dp_dba));
        set(&mut ji, 0, 12, &(-p.dp_dbg));
        set(&mut jj, 0, 0, &(rkt * rj));
        // r_v rows
        set(&mut ji, 3, 3, &skew(&(rkt * s_v)));
        set(&mut ji, 3, 6, &(-rkt));
        set(&mut ji, 3, 9, &(-p.dv_dba));
        set(&mut ji, 3, 12, &(-p.dv_dbg));
        set(&mut jj, 3, 6, &rkt);
        // r_R rows
        set(&mut ji, 6, 3, &(-jr_inv_neg));
        set(&mut ji, 6, 12, &(-jr_inv * delta_r_mat * j_tilde));
        set(&mut jj, 6, 3, &(jr_inv * delta_r_mat));
        // bias random walk rows
        set(&mut ji, 9, 9, &(-Matrix3::identity()));
        set(&mut jj, 9, 9, &Matrix3::identity());
        set(&mut ji, 12, 12, &(-Matrix3::identity()));
        set(&mut jj, 12, 12, &Matrix3::identity());

        Ok((r, ji, jj))
    }
}

impl Factor for ImuFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn linearize(&self, values: &Values) -> Result<Linearization, GraphError> {
        let (r, ji, jj) = self.raw(values)?;
        Ok(finish_residual(vec![ji, jj], r, &self.noise, RobustLoss::None))
    }
}

/// Pose constraint distilled from dense bundle adjustment, entering the graph
/// as a quadratic over the camera-pose deviations from the linearization
/// poses: `cost(l) = 0.5 l^T H l - l^T v` with `l_i = log(lin_i^-1 * (T_i * ext))`.
pub struct DbaPoseFactor {
    keys: Vec<Key>,
    pub constraint: DBAConstraint,
    /// Camera pose in the body frame.
    pub extrinsics: Pose,
}

impl DbaPoseFactor {
    pub fn new(keys: Vec<Key>, constraint: DBAConstraint, extrinsics: Pose) -> Self {
        assert_eq!(keys.len(), constraint.frames.len());
        DbaPoseFactor {
            keys,
            constraint,
            extrinsics,
        }
    }

    fn cam_deviation(&self, body: &Pose, lin: &Pose) -> Result<Twist, GraphError> {
        lin.local(&body.compose(&self.extrinsics))
            .map_err(|_| GraphError::SolverDiverged)
    }
}

impl Factor for DbaPoseFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn linearize(&self, values: &Values) -> Result<Linearization, GraphError> {
        let nf = self.keys.len();
        let dims: Vec<usize> = self
            .keys
            .iter()
            .map(|&k| values.expect(k).map(|v| v.dim()))
            .collect::<Result<_, _>>()?;
        let total: usize = dims.iter().sum();
        let mut l = DVector::zeros(6 * nf);
        // per-frame 6 x dim Jacobian of l_i, numeric; only the pose slice of
        // the state moves l_i
        let mut j_full = DMatrix::zeros(6 * nf, total);
        let mut col0 = 0;
        for (i, &k) in self.keys.iter().enumerate() {
            let body = *values.expect(k)?.as_pose();
            let lin = self.constraint.lin_poses[i];
            let li = self.cam_deviation(&body, &lin)?;
            l.rows_mut(6 * i, 6).copy_from_slice(&li.to_array());
            let mut delta = [0.0; 6];
            for c in 0..6 {
                delta[c] = FD_STEP;
                let lp = self.cam_deviation(&body.retract(&Twist::from_slice(&delta)), &lin)?;
                delta[c] = -FD_STEP;
                let lm = self.cam_deviation(&body.retract(&Twist::from_slice(&delta)), &lin)?;
                delta[c] = 0.0;
                let dp = lp.to_array();
                let dm = lm.to_array();
                for row in 0..6 {
                    j_full[(6 * i + row, col0 + c)] = (dp[row] - dm[row]) / (2.0 * FD_STEP);
                }
            }
            col0 += dims[i];
        }
        let hc = &self.constraint.h_c;
        let vc = &self.constraint.v_c;
        let hl = hc * &l;
        let cost = 0.5 * l.dot(&hl) - l.dot(vc);
        let b = j_full.transpose() * (vc - &hl);
        let h = j_full.transpose() * hc * &j_full;
        let h = (&h + h.transpose()) * 0.5;
        Ok(Linearization::Quadratic { h, b, cost })
    }
}

/// Gaussian prior produced by marginalizing states out of a graph. Stores the
/// linearization point and relinearizes to local coordinates on every call.
pub struct MarginalPrior {
    keys: Vec<Key>,
    /// Values the prior was linearized at, one per key.
    pub lin: Vec<Variable>,
    /// Hessian over the stacked key tangents.
    pub h: DMatrix<f64>,
    /// Right-hand side at the linearization point.
    pub b0: DVector<f64>,
}

impl MarginalPrior {
    pub fn new(keys: Vec<Key>, lin: Vec<Variable>, h: DMatrix<f64>, b0: DVector<f64>) -> Self {
        assert_eq!(keys.len(), lin.len());
        let dim: usize = lin.iter().map(|v| v.dim()).sum();
        assert_eq!(h.nrows(), dim);
        assert_eq!(b0.len(), dim);
        MarginalPrior { keys, lin, h, b0 }
    }

    /// Drop entries whose key no longer exists in the values (used when a
    /// prior outlives a state that was removed without remarginalization).
    pub fn key_count(&self) -> usize {
        self.keys.len()
    }
}

impl Factor for MarginalPrior {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn linearize(&self, values: &Values) -> Result<Linearization, GraphError> {
        let dim = self.h.nrows();
        let mut delta = DVector::zeros(dim);
        let mut off = 0;
        for (i, &k) in self.keys.iter().enumerate() {
            let cur = values.expect(k)?;
            let d = self.lin[i].local(cur);
            for (j, v) in d.iter().enumerate() {
                delta[off + j] = *v;
            }
            off += self.lin[i].dim();
        }
        let hd = &self.h * &delta;
        let cost = 0.5 * delta.dot(&hd) - delta.dot(&self.b0);
        Ok(Linearization::Quadratic {
            h: self.h.clone(),
            b: &self.b0 - hd,
            cost,
        })
    }
}
