//! Synthetic desk-scale worlds: ground-truth trajectories, corridor geometry,
//! place appearance, inertial/position sensor streams, and front-end providers
//! (dense flow, feature matches, descriptors) with controllable noise.
//!
//! Everything is a pure function of a session seed; independent RNG streams
//! keep one subsystem's draws from perturbing another's.

pub mod appearance;
pub mod providers;
pub mod sensors;
pub mod session;
pub mod trajectory;
pub mod world;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("degenerate route: {0}")]
    DegenerateRoute(String),
}

pub(crate) const STREAM_WORLD: u64 = 1;
pub(crate) const STREAM_APPEARANCE: u64 = 2;
pub(crate) const STREAM_IMU: u64 = 3;
pub(crate) const STREAM_IMU_BIAS: u64 = 4;
pub(crate) const STREAM_GNSS: u64 = 5;
pub(crate) const STREAM_FLOW: u64 = 6;
pub(crate) const STREAM_MATCHER: u64 = 7;
pub(crate) const STREAM_DESCRIPTOR: u64 = 8;
pub(crate) const STREAM_ODOM: u64 = 9;

/// splitmix64 finalizer: a cheap, well-mixed 64-bit hash.
pub(crate) fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic RNG for a (seed, subsystem stream, salt) triple. Distinct
/// triples give statistically independent streams.
pub(crate) fn stream_rng(seed: u64, stream: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed) ^ mix64(stream.rotate_left(23)) ^ mix64(salt.rotate_left(47)))
}

pub use appearance::{descriptor_provider, AppearanceConfig, AppearanceField, TwinZone};
pub use providers::{flow_provider, matcher_provider, FlowProviderConfig, Match, MatcherConfig};
pub use sensors::{
    synth_gnss, synth_imu, GnssFix, GnssSimConfig, ImuSimConfig, ImuStream, TimedImu,
};
pub use session::{gen_session, Keyframe, SessionStreams, WorldConfig};
pub use trajectory::{CubicSpline, Kinematics, TrajectoryModel};
pub use world::{
    camera_in_body, gt_inverse_depth, CorridorConfig, CorridorModel, Wall,
};
