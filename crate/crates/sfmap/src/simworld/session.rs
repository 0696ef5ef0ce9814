//! Full session synthesis: one call produces everything a mapping or
//! localization run consumes, deterministically from (config, session id).

use super::appearance::{descriptor_provider, AppearanceConfig, AppearanceField};
use super::providers::{FlowProviderConfig, MatcherConfig};
use super::sensors::{
    synth_gnss, synth_imu, GnssFix, GnssSimConfig, ImuSimConfig, ImuStream,
};
use super::trajectory::TrajectoryModel;
use super::world::{camera_in_body, gt_inverse_depth, CorridorConfig, CorridorModel};
use super::{stream_rng, SimError, STREAM_DESCRIPTOR};
use crate::dba::InverseDepthGrid;
use crate::fgraph::{write_trajectory_csv, NavState};
use crate::geom::{CameraIntrinsics, Pose};
use nalgebra::{DVector, Vector2};
use std::collections::BTreeMap;
use std::io::Write as IoWrite;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub route: Vec<Vector2<f64>>,
    /// Nominal speed, m/s.
    pub speed: f64,
    pub keyframe_hz: f64,
    pub camera: CameraIntrinsics,
    /// Camera mount height above the body origin, meters.
    pub camera_height: f64,
    pub corridor: CorridorConfig,
    pub imu: ImuSimConfig,
    pub gnss: GnssSimConfig,
    pub appearance: AppearanceConfig,
    pub matcher: MatcherConfig,
    pub flow: FlowProviderConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            route: vec![Vector2::new(0.0, 0.0), Vector2::new(100.0, 0.0)],
            speed: 5.0,
            keyframe_hz: 2.0,
            camera: CameraIntrinsics::new(60.0, 60.0, 32.0, 32.0, 64, 64),
            camera_height: 1.5,
            corridor: CorridorConfig::default(),
            imu: ImuSimConfig::default(),
            gnss: GnssSimConfig::default(),
            appearance: AppearanceConfig::default(),
            matcher: MatcherConfig::default(),
            flow: FlowProviderConfig::default(),
        }
    }
}

/// Ground-truth keyframe: body state, camera view, true depth, descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub t: f64,
    /// Ground-truth body state, biases set to the session's true IMU biases.
    pub nav: NavState,
    /// Camera-to-world pose (body pose composed with the mount extrinsics).
    pub cam_pose: Pose,
    pub depth: InverseDepthGrid,
    pub descriptor: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SessionStreams {
    pub session_id: u32,
    pub keyframes: Vec<Keyframe>,
    pub imu: ImuStream,
    pub gnss: Vec<GnssFix>,
    pub trajectory: TrajectoryModel,
    pub world: CorridorModel,
    pub camera_in_body: Pose,
}

/// Generate one session. The world and appearance field depend only on the
/// config seed, so separate sessions over the same route see the same scene;
/// sensor noise, biases and descriptor noise depend on the session id too.
pub fn gen_session(cfg: &WorldConfig, session_id: u32) -> Result<SessionStreams, SimError> {
    let traj = TrajectoryModel::new(&cfg.route, cfg.speed)?;
    let world = CorridorModel::along_route(&cfg.route, &cfg.corridor, cfg.seed);
    let field = AppearanceField::new(cfg.seed, cfg.appearance.clone());
    let session_seed = cfg.seed.wrapping_add(super::mix64(session_id as u64));
    let imu = synth_imu(&traj, &cfg.imu, session_seed);
    let gnss = synth_gnss(&traj, &cfg.gnss, session_seed);
    let ext = camera_in_body(cfg.camera_height);
    let mut desc_rng = stream_rng(session_seed, STREAM_DESCRIPTOR, 0);
    let mut keyframes = Vec::new();
    for t in traj.keyframe_times(cfg.keyframe_hz) {
        let mut nav = traj.nav_state(t);
        nav.bias_acc = imu.bias_acc;
        nav.bias_gyr = imu.bias_gyr;
        let cam_pose = nav.pose.compose(&ext);
        let depth = gt_inverse_depth(&cam_pose, &cfg.camera, &world);
        let descriptor = descriptor_provider(&nav.pose, &field, &mut desc_rng);
        keyframes.push(Keyframe {
            t,
            nav,
            cam_pose,
            depth,
            descriptor,
        });
    }
    Ok(SessionStreams {
        session_id,
        keyframes,
        imu,
        gnss,
        trajectory: traj,
        world,
        camera_in_body: ext,
    })
}

impl SessionStreams {
    /// Appearance field matching the session's world (same config seed).
    pub fn appearance_field(cfg: &WorldConfig) -> AppearanceField {
        AppearanceField::new(cfg.seed, cfg.appearance.clone())
    }

    /// Write `imu.csv`, `gnss.csv` and `gt.csv` into a directory.
    pub fn export_csv(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;

        let mut w = std::fs::File::create(dir.join("imu.csv"))?;
        writeln!(w, "t,ax,ay,az,gx,gy,gz")?;
        for s in &self.imu.samples {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                s.t, s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z
            )?;
        }

        let mut w = std::fs::File::create(dir.join("gnss.csv"))?;
        writeln!(w, "t,x,y,z,outlier")?;
        for f in &self.gnss {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{}",
                f.t,
                f.position.x,
                f.position.y,
                f.position.z,
                u8::from(f.outlier)
            )?;
        }

        let states: BTreeMap<u64, NavState> = self
            .keyframes
            .iter()
            .enumerate()
            .map(|(i, k)| (i as u64, k.nav))
            .collect();
        let mut w = std::fs::File::create(dir.join("gt.csv"))?;
        write_trajectory_csv(&states, &mut w)?;
        Ok(())
    }
}
