//! 2.5D corridor world: vertical wall segments plus a ground plane, with
//! closed-form ray casting for ground-truth inverse depth.

use super::stream_rng;
use crate::dba::InverseDepthGrid;
use crate::geom::{CameraIntrinsics, Pose, LAMBDA_MIN, Z_MIN};
use nalgebra::{Vector2, Vector3};
use rand::Rng;

/// Vertical wall: a 2D segment extruded from the ground up to `height`.
#[derive(Debug, Clone)]
pub struct Wall {
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
    pub height: f64,
}

/// Ray-castable world geometry.
#[derive(Debug, Clone)]
pub struct CorridorModel {
    pub walls: Vec<Wall>,
    pub ground: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorridorConfig {
    /// Lateral distance from the route to the building line, meters.
    pub wall_distance: f64,
    pub wall_height: f64,
    /// Per-segment facade depth variation amplitude, meters.
    pub depth_variation: f64,
}

impl Default for CorridorConfig {
    fn default() -> Self {
        CorridorConfig {
            wall_distance: 8.0,
            wall_height: 12.0,
            depth_variation: 2.0,
        }
    }
}

impl CorridorModel {
    /// Build facade walls flanking each route segment. Facade offsets vary
    /// per segment and side, drawn from a dedicated RNG stream so the world
    /// is a pure function of (seed, route, config).
    pub fn along_route(
        route: &[Vector2<f64>],
        cfg: &CorridorConfig,
        seed: u64,
    ) -> CorridorModel {
        let mut rng = stream_rng(seed, super::STREAM_WORLD, 0);
        let mut walls = Vec::new();
        for w in route.windows(2) {
            let dir = w[1] - w[0];
            let len = dir.norm();
            if len < 1e-9 {
                continue;
            }
            let dir = dir / len;
            let normal = Vector2::new(-dir.y, dir.x);
            for side in [-1.0, 1.0] {
                let var = if cfg.depth_variation > 0.0 {
                    rng.gen_range(-cfg.depth_variation..cfg.depth_variation)
                } else {
                    0.0
                };
                let offset = normal * side * (cfg.wall_distance + var);
                // extend past the corners so rays cannot slip through joints
                let a = w[0] + offset - dir * cfg.wall_distance;
                let b = w[1] + offset + dir * cfg.wall_distance;
                walls.push(Wall {
                    a,
                    b,
                    height: cfg.wall_height,
                });
            }
        }
        CorridorModel {
            walls,
            ground: true,
        }
    }

    /// Depth along a camera ray from `origin` with world direction `dir`,
    /// where `dir` is scaled so the camera-frame z component is 1 (then the
    /// ray parameter equals camera depth). Returns None for sky.
    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut best: Option<f64> = None;
        let mut consider = |s: f64| {
            if s > Z_MIN && best.is_none_or(|b| s < b) {
                best = Some(s);
            }
        };
        let p = Vector2::new(origin.x, origin.y);
        let r = Vector2::new(dir.x, dir.y);
        for wall in &self.walls {
            let e = wall.b - wall.a;
            let denom = r.x * e.y - r.y * e.x;
            if denom.abs() < 1e-12 {
                continue;
            }
            let q = wall.a - p;
            let s = (q.x * e.y - q.y * e.x) / denom;
            let u = (q.x * r.y - q.y * r.x) / denom;
            if s > 0.0 && (0.0..=1.0).contains(&u) {
                let z = origin.z + s * dir.z;
                if z >= 0.0 && z <= wall.height {
                    consider(s);
                }
            }
        }
        if self.ground && dir.z < -1e-12 {
            let s = -origin.z / dir.z;
            consider(s);
        }
        best
    }
}

/// Ground-truth inverse depth for a camera pose (camera-to-world), ray-cast
/// against the world. Sky cells clamp to the minimum inverse depth.
pub fn gt_inverse_depth(
    cam_pose: &Pose,
    k: &CameraIntrinsics,
    world: &CorridorModel,
) -> InverseDepthGrid {
    let rows = k.grid_rows();
    let cols = k.grid_cols();
    let r = cam_pose.rotation_matrix();
    let origin = *cam_pose.translation();
    let mut values = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let pix = k.grid_pixel(row, col);
            let dir_cam = Vector3::new((pix.x - k.cx) / k.fx, (pix.y - k.cy) / k.fy, 1.0);
            let dir_world = r * dir_cam;
            let lam = match world.cast(&origin, &dir_world) {
                Some(depth) => 1.0 / depth,
                None => LAMBDA_MIN,
            };
            values.push(lam);
        }
    }
    InverseDepthGrid::from_values(rows, cols, values)
}

/// Forward-facing camera mounted at `height` above the body origin: camera z
/// looks along body x, camera x points to body -y (right), camera y to body
/// -z (down).
pub fn camera_in_body(height: f64) -> Pose {
    let r = nalgebra::Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    );
    Pose::from_rotation_matrix(&r, Vector3::new(0.0, 0.0, height))
}
