//! Flat key=value run configuration shared by every subcommand.
//!
//! The file format is one `key = value` pair per line; `#` starts a comment.
//! Every key has a default, so an empty file is a valid configuration, and
//! unknown keys are rejected rather than silently ignored.

use crate::geom::CameraIntrinsics;
use crate::simworld::{
    AppearanceConfig, FlowProviderConfig, MatcherConfig, TwinZone, WorldConfig,
};
use nalgebra::Vector2;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn bad(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        msg: msg.into(),
    }
}

/// Coarse retrieval strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalMode {
    Single,
    Cluster,
    Sas,
}

impl FromStr for RetrievalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "single" => Ok(RetrievalMode::Single),
            "cluster" => Ok(RetrievalMode::Cluster),
            "sas" => Ok(RetrievalMode::Sas),
            other => Err(format!("`{other}` is not one of single|cluster|sas")),
        }
    }
}

impl std::fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RetrievalMode::Single => write!(f, "single"),
            RetrievalMode::Cluster => write!(f, "cluster"),
            RetrievalMode::Sas => write!(f, "sas"),
        }
    }
}

/// Fine pose estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineMode {
    Pnp,
    Fgo,
}

impl FromStr for FineMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pnp" => Ok(FineMode::Pnp),
            "fgo" => Ok(FineMode::Fgo),
            other => Err(format!("`{other}` is not one of pnp|fgo")),
        }
    }
}

impl std::fmt::Display for FineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FineMode::Pnp => write!(f, "pnp"),
            FineMode::Fgo => write!(f, "fgo"),
        }
    }
}

/// Everything a run needs, with laptop-scale defaults.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// World seed; also the base of every derived noise stream.
    pub seed: u64,
    /// Route waypoints on the ground plane, meters.
    pub route: Vec<Vector2<f64>>,
    pub speed: f64,
    /// Mapping keyframe rate.
    pub keyframe_hz: f64,
    /// Localization query rate.
    pub query_hz: f64,
    /// Square image side, pixels (divisible by 8).
    pub image_size: u32,
    pub focal: f64,
    pub camera_height: f64,
    /// Bidirectional co-visibility threshold gating map insertion.
    pub covis_threshold: f64,
    pub map_sessions: u32,
    /// Sliding-window length of the mapping estimator.
    pub window: usize,
    /// Batch-smooth the session every this many keyframes (and at the end).
    pub global_every: usize,
    pub descriptor_dim: usize,
    /// Appearance cell size, meters.
    pub descriptor_cell: f64,
    /// Cross-session descriptor noise.
    pub session_sigma: f64,
    /// Appearance twin zones as (min, max, offset) triples of 2D points.
    pub twin_zones: Vec<TwinZone>,
    /// Query-buffer window length L for sequence retrieval.
    pub retrieval_window: usize,
    pub retrieval_mode: RetrievalMode,
    pub fine_mode: FineMode,
    /// Number of query frames fused by the fine factor graph.
    pub fgo_frames: usize,
    pub matches_per_pair: usize,
    pub match_pixel_sigma: f64,
    pub match_outlier_fraction: f64,
    /// Relative depth scale error injected into reported map depths.
    pub depth_scale_error: f64,
    /// Query odometry drift sigma per meter traveled.
    pub odom_sigma: f64,
    pub gnss_sigma: f64,
    /// GNSS outage intervals `[start, end)`, seconds.
    pub gnss_outages: Vec<(f64, f64)>,
    /// Master switch for simulated sensor noise.
    pub sensor_noise: bool,
    /// Session id of the localization run (distinct from mapping sessions).
    pub query_session: u32,
    /// Mapping sessions overshoot the route end by this much, meters, so
    /// queries near the end still fall inside mapped coverage.
    pub route_margin_m: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            route: vec![Vector2::new(0.0, 0.0), Vector2::new(300.0, 0.0)],
            speed: 5.0,
            keyframe_hz: 5.0,
            query_hz: 1.0,
            image_size: 64,
            focal: 60.0,
            camera_height: 1.5,
            covis_threshold: 0.4,
            map_sessions: 2,
            window: 10,
            global_every: 50,
            descriptor_dim: 16,
            descriptor_cell: 4.0,
            session_sigma: 0.05,
            twin_zones: Vec::new(),
            retrieval_window: 10,
            retrieval_mode: RetrievalMode::Sas,
            fine_mode: FineMode::Fgo,
            fgo_frames: 5,
            matches_per_pair: 48,
            match_pixel_sigma: 0.3,
            match_outlier_fraction: 0.0,
            depth_scale_error: 0.0,
            odom_sigma: 0.01,
            gnss_sigma: 0.5,
            gnss_outages: Vec::new(),
            sensor_noise: true,
            query_session: 100,
            route_margin_m: 10.0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: line.to_string(),
                });
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = num(key, value)?,
            "route" => self.route = parse_points(key, value)?,
            "speed" => self.speed = num(key, value)?,
            "keyframe_hz" => self.keyframe_hz = num(key, value)?,
            "query_hz" => self.query_hz = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "focal" => self.focal = num(key, value)?,
            "camera_height" => self.camera_height = num(key, value)?,
            "covis_threshold" => self.covis_threshold = num(key, value)?,
            "map_sessions" => self.map_sessions = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "global_every" => self.global_every = num(key, value)?,
            "descriptor_dim" => self.descriptor_dim = num(key, value)?,
            "descriptor_cell" => self.descriptor_cell = num(key, value)?,
            "session_sigma" => self.session_sigma = num(key, value)?,
            "twin_zones" => self.twin_zones = parse_zones(key, value)?,
            "retrieval_window" => self.retrieval_window = num(key, value)?,
            "retrieval_mode" => {
                self.retrieval_mode = value.parse().map_err(|e: String| bad(key, e))?
            }
            "fine_mode" => self.fine_mode = value.parse().map_err(|e: String| bad(key, e))?,
            "fgo_frames" => self.fgo_frames = num(key, value)?,
            "matches_per_pair" => self.matches_per_pair = num(key, value)?,
            "match_pixel_sigma" => self.match_pixel_sigma = num(key, value)?,
            "match_outlier_fraction" => self.match_outlier_fraction = num(key, value)?,
            "depth_scale_error" => self.depth_scale_error = num(key, value)?,
            "odom_sigma" => self.odom_sigma = num(key, value)?,
            "gnss_sigma" => self.gnss_sigma = num(key, value)?,
            "gnss_outages" => self.gnss_outages = parse_intervals(key, value)?,
            "sensor_noise" => self.sensor_noise = parse_bool(key, value)?,
            "query_session" => self.query_session = num(key, value)?,
            "route_margin_m" => self.route_margin_m = num(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.route.len() < 2 {
            return Err(ConfigError::Invalid("route needs >= 2 waypoints".into()));
        }
        if !(self.covis_threshold > 0.0 && self.covis_threshold < 1.0) {
            return Err(ConfigError::Invalid(
                "covis_threshold must be in (0, 1)".into(),
            ));
        }
        if self.window < 2 {
            return Err(ConfigError::Invalid("window must be >= 2".into()));
        }
        if self.fgo_frames < 1 || self.retrieval_window < 1 {
            return Err(ConfigError::Invalid(
                "fgo_frames and retrieval_window must be >= 1".into(),
            ));
        }
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(ConfigError::Invalid(
                "image_size must be a positive multiple of 8".into(),
            ));
        }
        if self.map_sessions == 0 {
            return Err(ConfigError::Invalid("map_sessions must be >= 1".into()));
        }
        if self.route_margin_m < 0.0 {
            return Err(ConfigError::Invalid("route_margin_m must be >= 0".into()));
        }
        if self.speed <= 0.0 || self.keyframe_hz <= 0.0 || self.query_hz <= 0.0 {
            return Err(ConfigError::Invalid(
                "speed, keyframe_hz and query_hz must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn camera(&self) -> CameraIntrinsics {
        let c = self.image_size as f64 / 2.0;
        CameraIntrinsics::new(self.focal, self.focal, c, c, self.image_size, self.image_size)
    }

    /// The configured route with its last segment extended by the mapping
    /// overshoot margin.
    pub fn extended_route(&self) -> Vec<Vector2<f64>> {
        let mut route = self.route.clone();
        if self.route_margin_m > 0.0 {
            let n = route.len();
            let dir = route[n - 1] - route[n - 2];
            let len = dir.norm();
            if len > 1e-9 {
                route[n - 1] += dir * (self.route_margin_m / len);
            }
        }
        route
    }

    /// Simulation config for a session at the given keyframe rate.
    pub fn world(&self, keyframe_hz: f64) -> WorldConfig {
        let mut w = WorldConfig {
            seed: self.seed,
            route: self.route.clone(),
            speed: self.speed,
            keyframe_hz,
            camera: self.camera(),
            camera_height: self.camera_height,
            ..WorldConfig::default()
        };
        w.appearance = AppearanceConfig {
            dim: self.descriptor_dim,
            cell_size: self.descriptor_cell,
            session_sigma: self.session_sigma,
            twin_zones: self.twin_zones.clone(),
        };
        w.gnss.sigma = self.gnss_sigma;
        w.gnss.outages = self.gnss_outages.clone();
        w.gnss.noise_on = self.sensor_noise;
        w.imu.noise_on = self.sensor_noise;
        if !self.sensor_noise {
            w.imu.bias_acc_mag = 0.0;
            w.imu.bias_gyr_mag = 0.0;
        }
        w.matcher = MatcherConfig {
            pixel_sigma: if self.sensor_noise {
                self.match_pixel_sigma
            } else {
                0.0
            },
            outlier_fraction: self.match_outlier_fraction,
            matches_per_pair: self.matches_per_pair,
            depth_scale_error: self.depth_scale_error,
        };
        w.flow = FlowProviderConfig {
            pixel_sigma: if self.sensor_noise { 0.1 } else { 0.0 },
            ..FlowProviderConfig::default()
        };
        w
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| bad(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        other => Err(bad(key, format!("`{other}` is not a boolean"))),
    }
}

fn split_numbers(key: &str, chunk: &str) -> Result<Vec<f64>, ConfigError> {
    chunk
        .split(',')
        .map(|s| num::<f64>(key, s.trim()))
        .collect()
}

/// `x0,y0; x1,y1; ...`
fn parse_points(key: &str, value: &str) -> Result<Vec<Vector2<f64>>, ConfigError> {
    value
        .split(';')
        .filter(|c| !c.trim().is_empty())
        .map(|c| {
            let v = split_numbers(key, c)?;
            if v.len() != 2 {
                return Err(bad(key, format!("`{c}` is not an x,y point")));
            }
            Ok(Vector2::new(v[0], v[1]))
        })
        .collect()
}

/// `start,end; start,end; ...`
fn parse_intervals(key: &str, value: &str) -> Result<Vec<(f64, f64)>, ConfigError> {
    value
        .split(';')
        .filter(|c| !c.trim().is_empty())
        .map(|c| {
            let v = split_numbers(key, c)?;
            if v.len() != 2 || v[1] <= v[0] {
                return Err(bad(key, format!("`{c}` is not a start,end interval")));
            }
            Ok((v[0], v[1]))
        })
        .collect()
}

/// `minx,miny,maxx,maxy,offx,offy; ...`
fn parse_zones(key: &str, value: &str) -> Result<Vec<TwinZone>, ConfigError> {
    value
        .split(';')
        .filter(|c| !c.trim().is_empty())
        .map(|c| {
            let v = split_numbers(key, c)?;
            if v.len() != 6 {
                return Err(bad(key, format!("`{c}` needs 6 numbers")));
            }
            Ok(TwinZone {
                min: Vector2::new(v[0], v[1]),
                max: Vector2::new(v[2], v[3]),
                offset: Vector2::new(v[4], v[5]),
            })
        })
        .collect()
}
