//! IMU preintegration between consecutive keyframes.
//!
//! Accumulates raw accelerometer/gyroscope samples into relative motion terms
//! that are independent of the absolute state, with first-order bias
//! correction through stored bias Jacobians. Midpoint integration: each sample
//! is applied at the half-step rotation.

use super::values::GraphError;
use crate::geom::{skew, so3_exp, so3_right_jacobian};
use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector3};

/// One raw IMU sample: specific force, angular rate, and its interval.
#[derive(Debug, Clone, Copy)]
pub struct ImuSample {
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
    pub dt: f64,
}

/// Continuous-time IMU noise densities and bias random-walk densities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoise {
    /// Accelerometer white noise density, m/s^2/sqrt(Hz).
    pub accel_density: f64,
    /// Gyroscope white noise density, rad/s/sqrt(Hz).
    pub gyro_density: f64,
    /// Accelerometer bias random walk, m/s^3/sqrt(Hz).
    pub accel_walk: f64,
    /// Gyroscope bias random walk, rad/s^2/sqrt(Hz).
    pub gyro_walk: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        ImuNoise {
            accel_density: 1e-2,
            gyro_density: 1e-3,
            accel_walk: 1e-4,
            gyro_walk: 1e-5,
        }
    }
}

/// Preintegrated relative motion with covariance and bias Jacobians.
///
/// Error-state ordering for the covariance: [dp, dv, dtheta, dba, dbg].
#[derive(Debug, Clone)]
pub struct PreintegratedImu {
    pub delta_p: Vector3<f64>,
    pub delta_v: Vector3<f64>,
    pub delta_r: UnitQuaternion<f64>,
    pub dt: f64,
    /// Bias values the integration was linearized at.
    pub bias_acc: Vector3<f64>,
    pub bias_gyr: Vector3<f64>,
    /// 15x15 covariance of the error state.
    pub covariance: DMatrix<f64>,
    // bias Jacobians
    pub dp_dba: Matrix3<f64>,
    pub dp_dbg: Matrix3<f64>,
    pub dv_dba: Matrix3<f64>,
    pub dv_dbg: Matrix3<f64>,
    pub dr_dbg: Matrix3<f64>,
}

impl PreintegratedImu {
    /// Relative position corrected to first order for a bias deviation from
    /// the linearization point.
    pub fn corrected_delta_p(&self, ba: &Vector3<f64>, bg: &Vector3<f64>) -> Vector3<f64> {
        self.delta_p + self.dp_dba * (ba - self.bias_acc) + self.dp_dbg * (bg - self.bias_gyr)
    }

    pub fn corrected_delta_v(&self, ba: &Vector3<f64>, bg: &Vector3<f64>) -> Vector3<f64> {
        self.delta_v + self.dv_dba * (ba - self.bias_acc) + self.dv_dbg * (bg - self.bias_gyr)
    }

    pub fn corrected_delta_r(&self, bg: &Vector3<f64>) -> UnitQuaternion<f64> {
        self.delta_r * so3_exp(&(self.dr_dbg * (bg - self.bias_gyr)))
    }
}

/// Integrate a sample list at the given bias linearization point.
pub fn preintegrate(
    samples: &[ImuSample],
    bias_acc: Vector3<f64>,
    bias_gyr: Vector3<f64>,
    noise: &ImuNoise,
) -> Result<PreintegratedImu, GraphError> {
    if samples.is_empty() {
        return Err(GraphError::EmptySampleList);
    }
    let mut delta_p = Vector3::zeros();
    let mut delta_v = Vector3::zeros();
    let mut delta_r = UnitQuaternion::identity();
    let mut dt_total = 0.0;
    let mut cov = DMatrix::zeros(15, 15);

    let mut dp_dba = Matrix3::zeros();
    let mut dp_dbg = Matrix3::zeros();
    let mut dv_dba = Matrix3::zeros();
    let mut dv_dbg = Matrix3::zeros();
    let mut dr_dbg = Matrix3::zeros();

    for s in samples {
        assert!(s.dt > 0.0, "sample interval must be positive");
        let dt = s.dt;
        let acc = s.accel - bias_acc;
        let omega = s.gyro - bias_gyr;
        let r_half_q = delta_r * so3_exp(&(omega * (0.5 * dt)));
        let r_half: Matrix3<f64> = r_half_q.to_rotation_matrix().into_inner();
        let r_cur: Matrix3<f64> = delta_r.to_rotation_matrix().into_inner();
        let step_rot = so3_exp(&(omega * dt));
        let step_rot_m: Matrix3<f64> = step_rot.to_rotation_matrix().into_inner();
        let jr = so3_right_jacobian(&(omega * dt));
        let acc_skew = skew(&acc);

        // covariance propagation: x' = A x + noise
        let mut a = DMatrix::identity(15, 15);
        // dp' = dp + dv dt - 0.5 R_half [acc]x dtheta dt^2 - 0.5 R_half dba dt^2
        let half_dt2 = 0.5 * dt * dt;
        set_block(&mut a, 0, 3, &(Matrix3::identity() * dt));
        set_block(&mut a, 0, 6, &(-r_half * acc_skew * half_dt2));
        set_block(&mut a, 0, 9, &(-r_half * half_dt2));
        // dv' = dv - R_half [acc]x dtheta dt - R_half dba dt
        set_block(&mut a, 3, 6, &(-r_half * acc_skew * dt));
        set_block(&mut a, 3, 9, &(-r_half * dt));
        // dtheta' = Exp(omega dt)^T dtheta - Jr dbg dt
        set_block(&mut a, 6, 6, &step_rot_m.transpose());
        set_block(&mut a, 6, 12, &(-jr * dt));

        let mut next = &a * &cov * a.transpose();
        // additive discrete noise
        let qa = noise.accel_density * noise.accel_density * dt;
        let qg = noise.gyro_density * noise.gyro_density * dt;
        let qba = noise.accel_walk * noise.accel_walk * dt;
        let qbg = noise.gyro_walk * noise.gyro_walk * dt;
        let nv = r_half * r_half.transpose() * qa; // = qa * I
        add_block(&mut next, 0, 0, &(nv * half_dt2 * half_dt2 / (dt * dt)));
        add_block(&mut next, 3, 3, &(nv * dt));
        let ng = jr * jr.transpose() * (qg * dt);
        add_block(&mut next, 6, 6, &ng);
        for i in 0..3 {
            next[(9 + i, 9 + i)] += qba;
            next[(12 + i, 12 + i)] += qbg;
        }
        cov = next;

        // bias Jacobians (first order). The gyro bias enters the integrated
        // acceleration twice: through the accumulated rotation and through
        // the half-step increment of the current sample.
        let half_step_m: Matrix3<f64> = so3_exp(&(omega * (0.5 * dt)))
            .to_rotation_matrix()
            .into_inner();
        let jr_half = so3_right_jacobian(&(omega * (0.5 * dt)));
        let dacc_dbg: Matrix3<f64> = -r_cur * skew(&(half_step_m * acc)) * dr_dbg
            + r_half * acc_skew * jr_half * (0.5 * dt);
        dp_dba += dv_dba * dt - r_half * half_dt2;
        dp_dbg += dv_dbg * dt + dacc_dbg * half_dt2;
        dv_dba += -r_half * dt;
        dv_dbg += dacc_dbg * dt;
        dr_dbg = step_rot_m.transpose() * dr_dbg - jr * dt;

        // state integration at the half-step rotation
        delta_p += delta_v * dt + r_half * acc * half_dt2;
        delta_v += r_half * acc * dt;
        delta_r *= step_rot;
        dt_total += dt;
    }

    // keep covariance symmetric against round-off
    let sym = (&cov + cov.transpose()) * 0.5;

    Ok(PreintegratedImu {
        delta_p,
        delta_v,
        delta_r,
        dt: dt_total,
        bias_acc,
        bias_gyr,
        covariance: sym,
        dp_dba,
        dp_dbg,
        dv_dba,
        dv_dbg,
        dr_dbg,
    })
}

fn set_block(m: &mut DMatrix<f64>, r: usize, c: usize, b: &Matrix3<f64>) {
    for i in 0..3 {
        for j in 0..3 {
            m[(r + i, c + j)] = b[(i, j)];
        }
    }
}

fn add_block(m: &mut DMatrix<f64>, r: usize, c: usize, b: &Matrix3<f64>) {
    for i in 0..3 {
        for j in 0..3 {
            m[(r + i, c + j)] += b[(i, j)];
        }
    }
}
