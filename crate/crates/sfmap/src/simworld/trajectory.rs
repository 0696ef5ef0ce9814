//! Ground-truth trajectories: natural cubic splines through route waypoints,
//! parameterized by time at a nominal speed. Position, velocity and
//! acceleration are exact polynomial evaluations, so inertial synthesis has a
//! closed form.

use super::SimError;
use crate::fgraph::NavState;
use crate::geom::Pose;
use nalgebra::{UnitQuaternion, Vector2, Vector3};

/// Natural cubic spline through `(t_i, y_i)` knots (zero second derivative at
/// both ends). Two knots degenerate to a straight line.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    t: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn new(t: Vec<f64>, y: Vec<f64>) -> Self {
        assert_eq!(t.len(), y.len());
        assert!(t.len() >= 2);
        assert!(t.windows(2).all(|w| w[1] > w[0]), "knots must increase");
        let n = t.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // tridiagonal system for interior second derivatives
            let mut sub = vec![0.0; n];
            let mut diag = vec![0.0; n];
            let mut sup = vec![0.0; n];
            let mut rhs = vec![0.0; n];
            for i in 1..n - 1 {
                let h0 = t[i] - t[i - 1];
                let h1 = t[i + 1] - t[i];
                sub[i] = h0 / 6.0;
                diag[i] = (h0 + h1) / 3.0;
                sup[i] = h1 / 6.0;
                rhs[i] = (y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0;
            }
            // Thomas algorithm on rows 1..n-1
            for i in 2..n - 1 {
                let w = sub[i] / diag[i - 1];
                diag[i] -= w * sup[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            for i in (1..n - 1).rev() {
                let upper = if i + 1 < n - 1 { m[i + 1] } else { 0.0 };
                m[i] = (rhs[i] - sup[i] * upper) / diag[i];
            }
        }
        CubicSpline { t, y, m }
    }

    fn segment(&self, x: f64) -> usize {
        let n = self.t.len();
        match self.t.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.clamp(1, n - 1) - 1,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - x) / h;
        let b = (x - self.t[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }

    pub fn deriv1(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - x) / h;
        let b = (x - self.t[i]) / h;
        (self.y[i + 1] - self.y[i]) / h
            + (-(3.0 * a * a - 1.0) * self.m[i] + (3.0 * b * b - 1.0) * self.m[i + 1]) * h / 6.0
    }

    pub fn deriv2(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - x) / h;
        let b = (x - self.t[i]) / h;
        a * self.m[i] + b * self.m[i + 1]
    }
}

/// Exact kinematic sample of the ground-truth trajectory.
#[derive(Debug, Clone, Copy)]
pub struct Kinematics {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub accel_world: Vector3<f64>,
    pub heading: f64,
    pub yaw_rate: f64,
}

/// Planar C2 trajectory through route waypoints at a nominal speed. The body
/// frame is x-forward along the velocity, z-up.
#[derive(Debug, Clone)]
pub struct TrajectoryModel {
    sx: CubicSpline,
    sy: CubicSpline,
    pub duration: f64,
    pub route_length: f64,
}

impl TrajectoryModel {
    pub fn new(route: &[Vector2<f64>], speed: f64) -> Result<Self, SimError> {
        if route.len() < 2 {
            return Err(SimError::DegenerateRoute(format!(
                "route needs at least 2 waypoints, got {}",
                route.len()
            )));
        }
        if speed <= 0.0 {
            return Err(SimError::DegenerateRoute(format!(
                "speed must be positive, got {speed}"
            )));
        }
        let mut times = vec![0.0];
        let mut length = 0.0;
        for w in route.windows(2) {
            let d = (w[1] - w[0]).norm();
            if d < 1e-9 {
                return Err(SimError::DegenerateRoute(
                    "consecutive waypoints coincide".into(),
                ));
            }
            length += d;
            times.push(length / speed);
        }
        let xs: Vec<f64> = route.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = route.iter().map(|p| p.y).collect();
        Ok(TrajectoryModel {
            sx: CubicSpline::new(times.clone(), xs),
            sy: CubicSpline::new(times, ys),
            duration: length / speed,
            route_length: length,
        })
    }

    pub fn sample(&self, t: f64) -> Kinematics {
        let (x, y) = (self.sx.eval(t), self.sy.eval(t));
        let (vx, vy) = (self.sx.deriv1(t), self.sy.deriv1(t));
        let (ax, ay) = (self.sx.deriv2(t), self.sy.deriv2(t));
        let v2 = vx * vx + vy * vy;
        Kinematics {
            position: Vector3::new(x, y, 0.0),
            velocity: Vector3::new(vx, vy, 0.0),
            accel_world: Vector3::new(ax, ay, 0.0),
            heading: vy.atan2(vx),
            yaw_rate: if v2 > 1e-12 {
                (vx * ay - vy * ax) / v2
            } else {
                0.0
            },
        }
    }

    pub fn pose(&self, t: f64) -> Pose {
        let k = self.sample(t);
        Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), k.heading),
            k.position,
        )
    }

    pub fn nav_state(&self, t: f64) -> NavState {
        let k = self.sample(t);
        NavState::new(
            Pose::new(
                UnitQuaternion::from_axis_angle(&Vector3::z_axis(), k.heading),
                k.position,
            ),
            k.velocity,
            t,
        )
    }

    /// Keyframe timestamps at the given rate, always including t = 0.
    pub fn keyframe_times(&self, hz: f64) -> Vec<f64> {
        assert!(hz > 0.0);
        let dt = 1.0 / hz;
        let n = (self.duration / dt).floor() as usize;
        (0..=n).map(|i| i as f64 * dt).collect()
    }
}
