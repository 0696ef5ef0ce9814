//! Inertial and global-position sensor synthesis from the ground-truth
//! trajectory.

use super::trajectory::TrajectoryModel;
use super::{stream_rng, STREAM_GNSS, STREAM_IMU, STREAM_IMU_BIAS};
use crate::fgraph::{ImuNoise, GRAVITY};
use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ImuSimConfig {
    pub rate_hz: f64,
    pub noise: ImuNoise,
    /// Per-axis constant bias magnitude bounds; the session bias is drawn
    /// uniformly within them.
    pub bias_acc_mag: f64,
    pub bias_gyr_mag: f64,
    /// Disable gravity in the measurement model (pure-kinematics test worlds).
    pub gravity_on: bool,
    pub noise_on: bool,
}

impl Default for ImuSimConfig {
    fn default() -> Self {
        ImuSimConfig {
            rate_hz: 100.0,
            noise: ImuNoise::default(),
            bias_acc_mag: 0.02,
            bias_gyr_mag: 0.002,
            gravity_on: true,
            noise_on: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedImu {
    pub t: f64,
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuStream {
    pub samples: Vec<TimedImu>,
    pub rate_hz: f64,
    /// Ground-truth constant biases baked into the samples.
    pub bias_acc: Vector3<f64>,
    pub bias_gyr: Vector3<f64>,
}

impl ImuStream {
    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz
    }
}

/// Standard normal draw via Box-Muller.
pub(crate) fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gauss_vec(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    Vector3::new(gauss(rng), gauss(rng), gauss(rng)) * sigma
}

/// Synthesize IMU samples: `accel = R^T (a_w - g_w) + b_a + n`,
/// `gyro = omega_body + b_g + n`. Samples cover `[0, duration)` at the
/// configured rate; discrete noise sigma is `density * sqrt(rate)`.
pub fn synth_imu(traj: &TrajectoryModel, cfg: &ImuSimConfig, seed: u64) -> ImuStream {
    let mut bias_rng = stream_rng(seed, STREAM_IMU_BIAS, 0);
    let bias_acc = if cfg.bias_acc_mag > 0.0 {
        Vector3::new(
            bias_rng.gen_range(-cfg.bias_acc_mag..cfg.bias_acc_mag),
            bias_rng.gen_range(-cfg.bias_acc_mag..cfg.bias_acc_mag),
            bias_rng.gen_range(-cfg.bias_acc_mag..cfg.bias_acc_mag),
        )
    } else {
        Vector3::zeros()
    };
    let bias_gyr = if cfg.bias_gyr_mag > 0.0 {
        Vector3::new(
            bias_rng.gen_range(-cfg.bias_gyr_mag..cfg.bias_gyr_mag),
            bias_rng.gen_range(-cfg.bias_gyr_mag..cfg.bias_gyr_mag),
            bias_rng.gen_range(-cfg.bias_gyr_mag..cfg.bias_gyr_mag),
        )
    } else {
        Vector3::zeros()
    };

    let mut rng = stream_rng(seed, STREAM_IMU, 0);
    let dt = 1.0 / cfg.rate_hz;
    let sigma_a = cfg.noise.accel_density * cfg.rate_hz.sqrt();
    let sigma_g = cfg.noise.gyro_density * cfg.rate_hz.sqrt();
    let n = (traj.duration / dt).ceil() as usize;
    let gravity = if cfg.gravity_on { GRAVITY } else { Vector3::zeros() };
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        // each sample stands for the average rate over [t, t + dt), so read
        // the kinematics at the interval midpoint
        let k = traj.sample(t + 0.5 * dt);
        let r = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), k.heading)
            .to_rotation_matrix()
            .into_inner();
        let mut accel = r.transpose() * (k.accel_world - gravity) + bias_acc;
        let mut gyro = Vector3::new(0.0, 0.0, k.yaw_rate) + bias_gyr;
        if cfg.noise_on {
            accel += gauss_vec(&mut rng, sigma_a);
            gyro += gauss_vec(&mut rng, sigma_g);
        }
        samples.push(TimedImu { t, accel, gyro });
    }
    ImuStream {
        samples,
        rate_hz: cfg.rate_hz,
        bias_acc,
        bias_gyr,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnssSimConfig {
    pub rate_hz: f64,
    /// Per-axis position noise sigma, meters.
    pub sigma: f64,
    /// Antenna lever arm in the body frame.
    pub lever: Vector3<f64>,
    /// Intervals `[start, end)` in seconds with no fixes.
    pub outages: Vec<(f64, f64)>,
    /// Probability of a gross outlier fix.
    pub outlier_rate: f64,
    pub noise_on: bool,
}

impl Default for GnssSimConfig {
    fn default() -> Self {
        GnssSimConfig {
            rate_hz: 1.0,
            sigma: 0.5,
            lever: Vector3::new(0.0, 0.0, 1.0),
            outages: Vec::new(),
            outlier_rate: 0.0,
            noise_on: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnssFix {
    pub t: f64,
    pub position: Vector3<f64>,
    pub outlier: bool,
}

/// Synthesize antenna-position fixes. Outliers add a uniformly directed
/// offset of 20 to 100 meters.
pub fn synth_gnss(traj: &TrajectoryModel, cfg: &GnssSimConfig, seed: u64) -> Vec<GnssFix> {
    let mut rng = stream_rng(seed, STREAM_GNSS, 0);
    let dt = 1.0 / cfg.rate_hz;
    let n = (traj.duration / dt).ceil() as usize;
    let mut fixes = Vec::new();
    for i in 0..n {
        let t = i as f64 * dt;
        // keep the RNG stream position independent of outage layout
        let noise = gauss_vec(&mut rng, cfg.sigma);
        let is_outlier = cfg.outlier_rate > 0.0 && rng.gen_range(0.0..1.0) < cfg.outlier_rate;
        let offset = if is_outlier {
            let dir = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let dir = if dir.norm() < 1e-9 {
                Vector3::x()
            } else {
                dir.normalize()
            };
            dir * rng.gen_range(20.0..100.0)
        } else {
            Vector3::zeros()
        };
        if cfg.outages.iter().any(|&(a, b)| t >= a && t < b) {
            continue;
        }
        let k = traj.sample(t);
        let r = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), k.heading)
            .to_rotation_matrix()
            .into_inner();
        let mut pos = k.position + r * cfg.lever + offset;
        if cfg.noise_on {
            pos += noise;
        }
        fixes.push(GnssFix {
            t,
            position: pos,
            outlier: is_outlier,
        });
    }
    fixes
}
