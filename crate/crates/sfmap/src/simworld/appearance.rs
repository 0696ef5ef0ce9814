//! Synthetic place appearance: deterministic place codes per world cell and
//! heading sector, with twin zones that deliberately alias distinct places.

use super::{mix64, stream_rng, STREAM_APPEARANCE};
use nalgebra::{DVector, Vector2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Rectangular region whose place codes are borrowed from another region,
/// making two distinct places look alike. Points inside `[min, max]` are
/// shifted by `offset` before code lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwinZone {
    pub min: Vector2<f64>,
    pub max: Vector2<f64>,
    pub offset: Vector2<f64>,
}

impl TwinZone {
    fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceConfig {
    pub dim: usize,
    /// Side length of a place-code cell, meters.
    pub cell_size: f64,
    /// Magnitude of per-session descriptor noise (length of the noise vector).
    pub session_sigma: f64,
    pub twin_zones: Vec<TwinZone>,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        AppearanceConfig {
            dim: 32,
            cell_size: 5.0,
            session_sigma: 0.05,
            twin_zones: Vec::new(),
        }
    }
}

/// Deterministic mapping from (world cell, heading sector) to a unit-norm
/// place code. Codes are generated lazily from a hash of the coordinates, so
/// the field needs no storage and two instances with the same seed agree
/// everywhere.
#[derive(Debug, Clone)]
pub struct AppearanceField {
    seed: u64,
    cfg: AppearanceConfig,
}

/// Heading sector width: matches the 60-degree particle spacing used by the
/// retrieval front end.
const SECTOR_DEG: f64 = 60.0;

impl AppearanceField {
    pub fn new(seed: u64, cfg: AppearanceConfig) -> Self {
        assert!(cfg.dim >= 2 && cfg.cell_size > 0.0);
        AppearanceField { seed, cfg }
    }

    pub fn config(&self) -> &AppearanceConfig {
        &self.cfg
    }

    fn effective_position(&self, p: &Vector2<f64>) -> Vector2<f64> {
        for z in &self.cfg.twin_zones {
            if z.contains(p) {
                return p + z.offset;
            }
        }
        *p
    }

    /// Unit-norm place code of the cell containing `position`, for the given
    /// heading (radians).
    pub fn place_code(&self, position: &Vector2<f64>, heading: f64) -> DVector<f64> {
        let p = self.effective_position(position);
        let cx = (p.x / self.cfg.cell_size).floor() as i64;
        let cy = (p.y / self.cfg.cell_size).floor() as i64;
        let sector_width = SECTOR_DEG.to_radians();
        let wrapped = crate::geom::wrap_angle(heading);
        let sector = (((wrapped + std::f64::consts::PI) / sector_width) as i64)
            .clamp(0, (360.0 / SECTOR_DEG) as i64 - 1);
        let salt = mix64(cx as u64)
            ^ mix64((cy as u64).rotate_left(17))
            ^ mix64((sector as u64).rotate_left(43));
        let mut rng = stream_rng(self.seed, STREAM_APPEARANCE, salt);
        let mut v = DVector::zeros(self.cfg.dim);
        for i in 0..self.cfg.dim {
            v[i] = rng.gen_range(-1.0..1.0);
        }
        let n = v.norm();
        if n < 1e-9 {
            v[0] = 1.0;
            v
        } else {
            v / n
        }
    }

    /// Session-noisy descriptor: the place code plus `session_sigma` times a
    /// random unit direction drawn from the session's RNG, renormalized.
    pub fn descriptor(
        &self,
        position: &Vector2<f64>,
        heading: f64,
        session_rng: &mut ChaCha8Rng,
    ) -> DVector<f64> {
        let mut d = self.place_code(position, heading);
        if self.cfg.session_sigma > 0.0 {
            let mut noise = DVector::zeros(self.cfg.dim);
            for i in 0..self.cfg.dim {
                noise[i] = session_rng.gen_range(-1.0..1.0);
            }
            let n = noise.norm();
            if n > 1e-9 {
                d += noise * (self.cfg.session_sigma / n);
            }
            let dn = d.norm();
            if dn > 1e-9 {
                d /= dn;
            }
        }
        d
    }
}

/// Session descriptor for a body pose: position and heading are read off the
/// pose (body x-forward), then passed to the appearance field.
pub fn descriptor_provider(
    body_pose: &crate::geom::Pose,
    field: &AppearanceField,
    session_rng: &mut ChaCha8Rng,
) -> DVector<f64> {
    let t = body_pose.translation();
    let fwd = body_pose.rotation_matrix() * nalgebra::Vector3::x();
    let heading = fwd.y.atan2(fwd.x);
    field.descriptor(&Vector2::new(t.x, t.y), heading, session_rng)
}
