//! End-to-end drivers: build a map from synthetic sessions and run
//! coarse-to-fine localization against it.

use super::config::{FineMode, RetrievalMode, RunConfig};
use crate::dba::{assemble_frame_system, linearize_pair, schur_reduce};
use crate::fgraph::{
    preintegrate, DbaPoseFactor, GnssFactor, ImuFactor, ImuSample, Key, NavPriorFactor, NavState,
    NoiseModel, PreintegratedImu, SlidingWindow, SlidingWindowConfig, SolverOptions, GRAVITY,
};
use crate::fineloc::{
    build_fine_graph, pnp_ransac, solve_fine, Correspondence, FineConfig, MatchSet,
    QueryObservation, RansacConfig,
};
use crate::geom::{se3_exp, Pose, Twist};
use crate::mapstore::{
    size_report, InsertDecision, InsertPolicy, QuantizedDepth, SizeReport, StructureFrameMap,
    VisualStructureFrame,
};
use crate::sasloc::{
    default_offsets, retrieve_cluster, retrieve_sas, retrieve_single, QueryBuffer, RetrievalIndex,
};
use crate::simworld::sensors::gauss;
use crate::simworld::{
    flow_provider, gen_session, matcher_provider, mix64, stream_rng, SessionStreams, SimError,
    STREAM_FLOW, STREAM_MATCHER, STREAM_ODOM,
};
use nalgebra::Vector3;
use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as FmtWrite;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("estimation failed in session {session} at keyframe {frame}: {msg}")]
    Estimation {
        session: u32,
        frame: usize,
        msg: String,
    },
    #[error("localization: {0}")]
    Localization(String),
}

/// Per-session insertion statistics plus the final size accounting.
#[derive(Debug, Clone)]
pub struct MapSummary {
    pub sessions: u32,
    pub added: usize,
    pub replaced: usize,
    pub discarded: usize,
    pub size: SizeReport,
}

impl std::fmt::Display for MapSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "sessions {}  frames added {}  replaced {}  discarded {}",
            self.sessions, self.added, self.replaced, self.discarded
        )?;
        let s = &self.size;
        writeln!(
            f,
            "map: {} frames, {} bytes total ({} payload, {} descriptor, {} depth, {} record overhead)",
            s.frame_count,
            s.total_bytes,
            s.payload_bytes,
            s.descriptor_bytes,
            s.depth_bytes,
            s.record_overhead_bytes
        )
    }
}

/// Run every mapping session and fold its extracted frames into one map.
pub fn build_map(cfg: &RunConfig) -> Result<(StructureFrameMap, MapSummary), PipelineError> {
    let mut map = StructureFrameMap::new(cfg.camera(), cfg.covis_threshold, InsertPolicy::Incremental);
    let mut summary = MapSummary {
        sessions: cfg.map_sessions,
        added: 0,
        replaced: 0,
        discarded: 0,
        size: size_report(&map),
    };
    let mut next_id = 0u64;
    for session_id in 0..cfg.map_sessions {
        // mapping overshoots the route end so localization queries near the
        // end still have covered appearance cells
        let mut world = cfg.world(cfg.keyframe_hz);
        world.route = cfg.extended_route();
        let session = gen_session(&world, session_id)?;
        map.route_length_m = map.route_length_m.max(session.trajectory.route_length);
        let smoothed = estimate_session(&session, cfg)?.smoothed;
        for (i, kf) in session.keyframes.iter().enumerate() {
            let nav = smoothed
                .get(&(i as u64))
                .ok_or_else(|| PipelineError::Estimation {
                    session: session_id,
                    frame: i,
                    msg: "missing smoothed state".into(),
                })?;
            let frame = VisualStructureFrame {
                id: next_id,
                timestamp: kf.t,
                pose: nav.pose.compose(&session.camera_in_body),
                image_payload: payload_stub(next_id),
                depth: QuantizedDepth::quantize(&kf.depth),
                descriptor: kf.descriptor.iter().map(|&x| x as f32).collect(),
                score: 0.0,
                session: session_id,
            };
            next_id += 1;
            match map.try_insert(frame) {
                InsertDecision::Added => summary.added += 1,
                InsertDecision::Replaced(_) => summary.replaced += 1,
                InsertDecision::Discarded => summary.discarded += 1,
            }
        }
    }
    summary.size = size_report(&map);
    Ok((map, summary))
}

/// Deterministic stand-in for a compressed image: the map format stores an
/// opaque payload, so its content only has to be reproducible.
fn payload_stub(id: u64) -> Vec<u8> {
    (0..64u64).map(|i| (mix64(id ^ i) & 0xff) as u8).collect()
}

/// Realtime (in-window, causal) and batch-smoothed trajectories of one
/// estimated session.
#[derive(Debug, Clone)]
pub struct SessionEstimate {
    /// State of each keyframe right after it was optimized as the newest
    /// window member; what an online consumer would have seen.
    pub realtime: BTreeMap<u64, NavState>,
    /// Batch smooth over all archived factors at the end of the session.
    pub smoothed: BTreeMap<u64, NavState>,
}

/// Sliding-window multi-sensor estimation of one session, then a batch
/// smooth of the archived factors.
pub fn estimate_session(
    session: &SessionStreams,
    cfg: &RunConfig,
) -> Result<SessionEstimate, PipelineError> {
    let fail = |frame: usize, msg: String| PipelineError::Estimation {
        session: session.session_id,
        frame,
        msg,
    };
    let k = cfg.camera();
    let world = cfg.world(cfg.keyframe_hz);
    let mut window = SlidingWindow::new(SlidingWindowConfig {
        window: cfg.window,
        solver: SolverOptions::default(),
    });
    let session_seed = session_seed_of(cfg, session.session_id);
    let mut flow_rng = stream_rng(session_seed, STREAM_FLOW, 0);
    let imu_dt = session.imu.dt();
    let gnss_noise = NoiseModel::isotropic(3, cfg.gnss_sigma.max(1e-3));
    let mut smoothed: Option<BTreeMap<u64, NavState>> = None;
    let mut realtime: BTreeMap<u64, NavState> = BTreeMap::new();

    for (i, kf) in session.keyframes.iter().enumerate() {
        if i == 0 {
            // anchor the session: pose and velocity near truth, biases free
            let mut init = kf.nav;
            init.bias_acc = Vector3::zeros();
            init.bias_gyr = Vector3::zeros();
            window.add_state(0, init);
            window.add_factor(
                Box::new(NavPriorFactor::new(
                    Key::nav(0),
                    init,
                    NoiseModel::from_sigmas(&[
                        0.1, 0.1, 0.1, 0.02, 0.02, 0.02, 0.1, 0.1, 0.1, 0.05, 0.05, 0.05, 0.01,
                        0.01, 0.01,
                    ]),
                )),
                true,
            );
        } else {
            let prev = window
                .estimate(i as u64 - 1)
                .ok_or_else(|| fail(i, "previous state left the window".into()))?;
            let pre = preintegrate_span(
                session,
                kf.t,
                session.keyframes[i - 1].t,
                &prev,
                imu_dt,
                &world.imu.noise,
            )
            .map_err(|e| fail(i, e))?;
            let mut guess = predict(&prev, &pre);
            guess.timestamp = kf.t;
            window.add_state(i as u64, guess);
            window.add_factor(
                Box::new(
                    ImuFactor::new(Key::nav(i as u64 - 1), Key::nav(i as u64), pre)
                        .map_err(|e| fail(i, format!("{e:?}")))?,
                ),
                true,
            );

            // dense-alignment constraint between the previous and the new
            // frame, reduced to a pose-pair quadratic at the current guess
            let est_i = prev.pose.compose(&session.camera_in_body);
            let est_j = guess.pose.compose(&session.camera_in_body);
            let depth = &session.keyframes[i - 1].depth;
            let flow = flow_provider(
                &est_i,
                &est_j,
                depth,
                &session.keyframes[i - 1].cam_pose,
                &kf.cam_pose,
                depth,
                &k,
                &world.flow,
                &mut flow_rng,
            )
            .map_err(|e| fail(i, format!("{e:?}")))?;
            let pair = linearize_pair(&est_i, &est_j, depth, &flow, &k, i as u64 - 1, i as u64)
                .map_err(|e| fail(i, format!("{e:?}")))?;
            let sys = assemble_frame_system(&[pair], &[i as u64 - 1, i as u64])
                .map_err(|e| fail(i, format!("{e:?}")))?;
            let constraint = schur_reduce(&sys, &[est_i, est_j]);
            window.add_factor(
                Box::new(DbaPoseFactor::new(
                    vec![Key::nav(i as u64 - 1), Key::nav(i as u64)],
                    constraint,
                    session.camera_in_body,
                )),
                true,
            );
        }
        if let Some(fix) = fix_near(&session.gnss, kf.t, 0.5 / cfg.keyframe_hz) {
            if !fix.outlier {
                window.add_factor(
                    Box::new(GnssFactor::new(
                        Key::nav(i as u64),
                        fix.position,
                        world.gnss.lever,
                        gnss_noise.clone(),
                    )),
                    true,
                );
            }
        }
        window.optimize().map_err(|e| fail(i, format!("{e:?}")))?;
        realtime.insert(
            i as u64,
            window
                .estimate(i as u64)
                .ok_or_else(|| fail(i, "newest state left the window".into()))?,
        );
        window.enforce_window().map_err(|e| fail(i, format!("{e:?}")))?;
        if cfg.global_every > 0 && (i + 1) % cfg.global_every == 0 {
            smoothed = Some(window.global_smooth().map_err(|e| fail(i, format!("{e:?}")))?);
        }
    }
    let final_smooth = window
        .global_smooth()
        .map_err(|e| fail(session.keyframes.len(), format!("{e:?}")))?;
    let _ = smoothed;
    Ok(SessionEstimate {
        realtime,
        smoothed: final_smooth,
    })
}

fn session_seed_of(cfg: &RunConfig, session_id: u32) -> u64 {
    cfg.seed.wrapping_add(mix64(session_id as u64))
}

/// IMU samples covering `(t_prev, t]`, preintegrated at the current bias
/// estimate.
fn preintegrate_span(
    session: &SessionStreams,
    t: f64,
    t_prev: f64,
    prev: &NavState,
    dt: f64,
    noise: &crate::fgraph::ImuNoise,
) -> Result<PreintegratedImu, String> {
    let first = (t_prev / dt).round() as usize;
    let last = (t / dt).round() as usize;
    let samples: Vec<ImuSample> = session
        .imu
        .samples
        .get(first..last.min(session.imu.samples.len()))
        .unwrap_or(&[])
        .iter()
        .map(|s| ImuSample {
            accel: s.accel,
            gyro: s.gyro,
            dt,
        })
        .collect();
    if samples.is_empty() {
        return Err(format!("no inertial samples in ({t_prev}, {t}]"));
    }
    preintegrate(&samples, prev.bias_acc, prev.bias_gyr, noise).map_err(|e| format!("{e:?}"))
}

/// Forward-propagate a state through a preintegrated inertial delta.
fn predict(prev: &NavState, pre: &PreintegratedImu) -> NavState {
    let r0 = prev.pose.rotation_matrix();
    let dt = pre.dt;
    let dp = pre.corrected_delta_p(&prev.bias_acc, &prev.bias_gyr);
    let dv = pre.corrected_delta_v(&prev.bias_acc, &prev.bias_gyr);
    let dr = pre.corrected_delta_r(&prev.bias_gyr);
    let mut next = *prev;
    next.pose = Pose::new(
        prev.pose.rotation() * dr,
        prev.pose.translation() + prev.velocity * dt + 0.5 * GRAVITY * dt * dt + r0 * dp,
    );
    next.velocity = prev.velocity + GRAVITY * dt + r0 * dv;
    next.timestamp = prev.timestamp + dt;
    next
}

fn fix_near(
    fixes: &[crate::simworld::GnssFix],
    t: f64,
    tol: f64,
) -> Option<&crate::simworld::GnssFix> {
    fixes
        .iter()
        .filter(|f| (f.t - t).abs() <= tol)
        .min_by(|a, b| (a.t - t).abs().partial_cmp(&(b.t - t).abs()).unwrap())
}

/// CSV logs of one localization run.
#[derive(Debug, Clone, PartialEq)]
pub struct LocLogs {
    /// `t,frame_id,sas,margin,method,gt_dist_m`
    pub coarse: String,
    /// `t,tx,ty,tz,err_m,inliers,n_frames,mode`
    pub fine: String,
}

pub const COARSE_HEADER: &str = "t,frame_id,sas,margin,method,gt_dist_m";
pub const FINE_HEADER: &str = "t,tx,ty,tz,err_m,inliers,n_frames,mode";

/// One fine-localization window entry.
struct FineEntry {
    obs: QueryObservation,
    odom_cam: Pose,
}

/// Run the query session against a built map: per query, buffer the
/// descriptor, retrieve a frame, match into it, and solve the fine pose.
pub fn run_localization(
    map: &StructureFrameMap,
    cfg: &RunConfig,
) -> Result<LocLogs, PipelineError> {
    if map.is_empty() {
        return Err(PipelineError::Localization("the map is empty".into()));
    }
    let world = cfg.world(cfg.query_hz);
    let session = gen_session(&world, cfg.query_session)?;
    let k = cfg.camera();
    let session_seed = session_seed_of(cfg, cfg.query_session);
    let mut match_rng = stream_rng(session_seed, STREAM_MATCHER, 0);
    let mut odom_rng = stream_rng(session_seed, STREAM_ODOM, 0);
    let index = RetrievalIndex::from_map(map, &session.camera_in_body);
    let mut buf = QueryBuffer::new(cfg.retrieval_window);
    let offsets = default_offsets();
    let fine_cfg = FineConfig::default();
    let ransac = RansacConfig::default();
    let n_frames = match cfg.fine_mode {
        FineMode::Pnp => 1,
        FineMode::Fgo => cfg.fgo_frames,
    };
    let mode_tag = match cfg.fine_mode {
        FineMode::Pnp => "pnp".to_string(),
        FineMode::Fgo => format!("fgo{}", cfg.fgo_frames),
    };

    let mut coarse = String::from(COARSE_HEADER);
    coarse.push('\n');
    let mut fine = String::from(FINE_HEADER);
    fine.push('\n');

    // drifting body odometry: ground-truth relatives with per-step noise
    let mut odom_body = session.keyframes[0].nav.pose;
    let mut prev_gt_body = odom_body;
    let mut entries: VecDeque<FineEntry> = VecDeque::new();

    for (qi, kf) in session.keyframes.iter().enumerate() {
        if qi > 0 {
            let rel = prev_gt_body.inverse().compose(&kf.nav.pose);
            let dist = rel.translation().norm();
            let s = cfg.odom_sigma * dist;
            let noise = if cfg.sensor_noise && s > 0.0 {
                se3_exp(&Twist::new(
                    Vector3::new(gauss(&mut odom_rng), gauss(&mut odom_rng), gauss(&mut odom_rng))
                        * s,
                    Vector3::new(gauss(&mut odom_rng), gauss(&mut odom_rng), gauss(&mut odom_rng))
                        * (0.1 * s),
                ))
            } else {
                Pose::identity()
            };
            odom_body = odom_body.compose(&rel.compose(&noise));
            prev_gt_body = kf.nav.pose;
        }

        buf.push_query(kf.t, kf.descriptor.clone(), odom_body, &index)
            .map_err(|e| PipelineError::Localization(e.to_string()))?;
        let retrieval = match cfg.retrieval_mode {
            RetrievalMode::Single => retrieve_single(&kf.descriptor, &index),
            RetrievalMode::Cluster => {
                retrieve_cluster(&buf, &index, cfg.retrieval_window.saturating_sub(1), 3)
            }
            RetrievalMode::Sas => retrieve_sas(&buf, &index, &offsets),
        }
        .map_err(|e| PipelineError::Localization(e.to_string()))?;
        let frame = map
            .get(retrieval.frame_id)
            .ok_or_else(|| PipelineError::Localization("retrieved frame left the map".into()))?;
        let gt_xy = kf.nav.pose.translation().xy();
        let gt_dist = (frame.position_2d() - gt_xy).norm();
        writeln!(
            coarse,
            "{:.3},{},{:.6},{:.6},{},{:.6}",
            kf.t, retrieval.frame_id, retrieval.distance, retrieval.margin, retrieval.method,
            gt_dist
        )
        .unwrap();

        let matches = matcher_provider(
            &frame.pose,
            &kf.cam_pose,
            &frame.depth.dequantize(),
            &k,
            &world.matcher,
            &mut match_rng,
        );
        let match_set = MatchSet {
            map_frame_id: frame.id,
            map_pose: frame.pose,
            correspondences: matches
                .iter()
                .map(|m| Correspondence {
                    map_pixel: m.map_pixel,
                    query_pixel: m.query_pixel,
                    inv_depth: m.inv_depth,
                })
                .collect(),
        };

        let odom_cam = odom_body.compose(&session.camera_in_body);
        let initial = match entries.back() {
            Some(prev) => {
                let rel = prev.odom_cam.inverse().compose(&odom_cam);
                prev.obs.initial_pose.compose(&rel)
            }
            None => frame.pose,
        };
        entries.push_back(FineEntry {
            obs: QueryObservation {
                timestamp: kf.t,
                initial_pose: initial,
                match_sets: vec![match_set],
            },
            odom_cam,
        });
        while entries.len() > n_frames {
            entries.pop_front();
        }

        let (est, err, inliers) = match cfg.fine_mode {
            FineMode::Pnp => solve_pnp(&entries.back().unwrap().obs, &k, &ransac, kf),
            FineMode::Fgo => solve_fgo(&mut entries, &k, &fine_cfg, kf),
        };
        let t_est = est.translation();
        writeln!(
            fine,
            "{:.3},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            kf.t,
            t_est.x,
            t_est.y,
            t_est.z,
            err,
            inliers,
            entries.len(),
            mode_tag
        )
        .unwrap();
        let _ = qi;
    }
    Ok(LocLogs { coarse, fine })
}

fn horizontal_error(est: &Pose, gt_cam: &Pose) -> f64 {
    (est.translation().xy() - gt_cam.translation().xy()).norm()
}

fn solve_pnp(
    obs: &QueryObservation,
    k: &crate::geom::CameraIntrinsics,
    ransac: &RansacConfig,
    kf: &crate::simworld::Keyframe,
) -> (Pose, f64, usize) {
    let Some(ms) = obs.match_sets.first() else {
        return (obs.initial_pose, f64::NAN, 0);
    };
    match pnp_ransac(ms, k, ransac) {
        Ok(r) => {
            let est = ms.map_pose.compose(&r.pose);
            (est, horizontal_error(&est, &kf.cam_pose), r.inliers)
        }
        Err(_) => (obs.initial_pose, f64::NAN, 0),
    }
}

fn solve_fgo(
    entries: &mut VecDeque<FineEntry>,
    k: &crate::geom::CameraIntrinsics,
    fine_cfg: &FineConfig,
    kf: &crate::simworld::Keyframe,
) -> (Pose, f64, usize) {
    let queries: Vec<QueryObservation> = entries.iter().map(|e| e.obs.clone()).collect();
    let odometry: Vec<Pose> = entries
        .iter()
        .zip(entries.iter().skip(1))
        .map(|(a, b)| a.odom_cam.inverse().compose(&b.odom_cam))
        .collect();
    let solved = build_fine_graph(&queries, &odometry, k, fine_cfg)
        .and_then(|mut p| solve_fine(&mut p, &SolverOptions::default()).map(|r| (p, r)));
    match solved {
        Ok((_, r)) if r.converged => {
            // warm-start the next window with this solution
            for (e, pose) in entries.iter_mut().zip(r.poses.iter()) {
                e.obs.initial_pose = *pose;
            }
            let est = *r.poses.last().unwrap();
            let inl = *r.inliers.last().unwrap();
            (est, horizontal_error(&est, &kf.cam_pose), inl)
        }
        _ => {
            let est = entries.back().unwrap().obs.initial_pose;
            (est, f64::NAN, 0)
        }
    }
}
