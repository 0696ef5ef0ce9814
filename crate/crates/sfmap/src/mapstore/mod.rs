//! Visual structure-frame map: geo-tagged keyframe records, the
//! co-visibility-gated insert/replace/discard mechanism, a spatial index for
//! candidate retrieval, serialization and size accounting.

pub mod codec;
pub mod kdtree;

use crate::dba::{covisibility, InverseDepthGrid};
use crate::geom::{CameraIntrinsics, Pose};
use kdtree::KdTree2;
use nalgebra::Vector2;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a structure-frame map file (bad magic)")]
    BadMagic,
    #[error("unsupported map file version {0}")]
    UnsupportedVersion(u32),
    #[error("map file checksum mismatch or truncated data")]
    ChecksumMismatch,
}

/// Candidate radius for the insertion gate, meters.
pub const CANDIDATE_RADIUS: f64 = 50.0;

/// Default bidirectional co-visibility threshold.
pub const DEFAULT_COVIS_THRESHOLD: f64 = 0.4;

/// Inverse-depth grid quantized to 16 bits with a per-frame affine range.
///
/// `value = offset + scale * code`; the range is the frame's own min/max, so
/// the round-trip error is bounded by `(max - min) / 65535`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedDepth {
    pub rows: u16,
    pub cols: u16,
    pub scale: f32,
    pub offset: f32,
    pub codes: Vec<u16>,
}

impl QuantizedDepth {
    pub fn quantize(grid: &InverseDepthGrid) -> Self {
        let vals = grid.values();
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = ((max - min) / 65535.0) as f32;
        let offset = min as f32;
        let codes = vals
            .iter()
            .map(|&v| {
                if scale > 0.0 {
                    (((v - offset as f64) / scale as f64).round())
                        .clamp(0.0, 65535.0) as u16
                } else {
                    0
                }
            })
            .collect();
        QuantizedDepth {
            rows: grid.rows() as u16,
            cols: grid.cols() as u16,
            scale,
            offset,
            codes,
        }
    }

    pub fn dequantize(&self) -> InverseDepthGrid {
        let values = self
            .codes
            .iter()
            .map(|&c| self.offset as f64 + self.scale as f64 * c as f64)
            .collect();
        InverseDepthGrid::from_values(self.rows as usize, self.cols as usize, values)
    }
}

/// One stored map frame: pose, opaque image payload, quantized depth, global
/// descriptor and maintenance metadata. `pose` is camera-to-world.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualStructureFrame {
    pub id: u64,
    pub timestamp: f64,
    pub pose: Pose,
    pub image_payload: Vec<u8>,
    pub depth: QuantizedDepth,
    pub descriptor: Vec<f32>,
    pub score: f32,
    pub session: u32,
}

impl VisualStructureFrame {
    pub fn position_2d(&self) -> Vector2<f64> {
        let t = self.pose.translation();
        Vector2::new(t.x, t.y)
    }

    pub fn descriptor_norm(&self) -> f64 {
        self.descriptor
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// Scoring policy applied at insertion time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InsertPolicy {
    /// All frames score 0: existing coverage always wins ties, so the map is
    /// only extended where views are new.
    Incremental,
    /// Score = session index: frames from later sessions replace older ones.
    FreshnessFirst,
    /// Keep the score already carried by the frame (freshness, uncertainty,
    /// dynamic-object proportion... whatever the caller encodes).
    CustomScore,
}

impl InsertPolicy {
    fn score(&self, frame: &VisualStructureFrame) -> f32 {
        match self {
            InsertPolicy::Incremental => 0.0,
            InsertPolicy::FreshnessFirst => frame.session as f32,
            InsertPolicy::CustomScore => frame.score,
        }
    }
}

/// Outcome of a frame insertion attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum InsertDecision {
    Added,
    /// Added after deleting these conflicting frames.
    Replaced(Vec<u64>),
    Discarded,
}

/// The map: frame records plus a 2D spatial index over frame positions.
#[derive(Debug, Clone)]
pub struct StructureFrameMap {
    frames: BTreeMap<u64, VisualStructureFrame>,
    tree: KdTree2,
    /// Bidirectional co-visibility threshold in (0, 1).
    pub covis_threshold: f64,
    pub policy: InsertPolicy,
    pub camera: CameraIntrinsics,
    /// Mapped route length, meters (for per-km size accounting).
    pub route_length_m: f64,
}

impl StructureFrameMap {
    pub fn new(camera: CameraIntrinsics, covis_threshold: f64, policy: InsertPolicy) -> Self {
        assert!(
            covis_threshold > 0.0 && covis_threshold < 1.0,
            "co-visibility threshold must be in (0, 1)"
        );
        StructureFrameMap {
            frames: BTreeMap::new(),
            tree: KdTree2::new(),
            covis_threshold,
            policy,
            camera,
            route_length_m: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&VisualStructureFrame> {
        self.frames.get(&id)
    }

    pub fn frames(&self) -> impl Iterator<Item = &VisualStructureFrame> {
        self.frames.values()
    }

    /// Frame ids within `radius` meters of a ground-plane point.
    pub fn spatial_query(&self, xy: &Vector2<f64>, radius: f64) -> Vec<u64> {
        assert!(radius > 0.0);
        self.tree.within_radius(xy, radius)
    }

    /// The maintenance gate: candidate retrieval by radius, bidirectional
    /// co-visibility against each candidate, then add / replace / discard by
    /// score comparison. Ties discard the newcomer so replays are stable.
    pub fn try_insert(&mut self, mut frame: VisualStructureFrame) -> InsertDecision {
        frame.score = self.policy.score(&frame);
        let candidates = self
            .tree
            .within_radius(&frame.position_2d(), CANDIDATE_RADIUS);
        let new_grid = frame.depth.dequantize();
        let mut conflicting: Vec<u64> = Vec::new();
        for id in candidates {
            let other = &self.frames[&id];
            let covis = covisibility(
                &frame.pose,
                &other.pose,
                &new_grid,
                &other.depth.dequantize(),
                &self.camera,
            );
            if covis >= self.covis_threshold {
                conflicting.push(id);
            }
        }
        if conflicting.is_empty() {
            self.insert_unchecked(frame);
            return InsertDecision::Added;
        }
        let max_score = conflicting
            .iter()
            .map(|id| self.frames[id].score)
            .fold(f32::NEG_INFINITY, f32::max);
        if frame.score > max_score {
            for &id in &conflicting {
                self.remove(id);
            }
            self.insert_unchecked(frame);
            InsertDecision::Replaced(conflicting)
        } else {
            InsertDecision::Discarded
        }
    }

    pub(crate) fn insert_unchecked(&mut self, frame: VisualStructureFrame) {
        self.tree.insert(frame.id, frame.position_2d());
        self.frames.insert(frame.id, frame);
    }

    fn remove(&mut self, id: u64) {
        if self.frames.remove(&id).is_some() {
            self.tree.remove(id);
        }
    }
}

/// Exact byte accounting of the serialized map, by category.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub frame_count: usize,
    pub header_bytes: usize,
    pub payload_bytes: usize,
    pub descriptor_bytes: usize,
    pub depth_bytes: usize,
    /// Fixed per-record fields: id, timestamp, pose, session, score, and the
    /// two length prefixes.
    pub record_overhead_bytes: usize,
    pub trailer_bytes: usize,
    pub total_bytes: usize,
    /// Bytes per kilometer of mapped route; None when no route length is set.
    pub bytes_per_km: Option<f64>,
}

/// Fixed serialized size of the file header.
pub const HEADER_BYTES: usize = 4 + 4 + 8 + 8 + 8;
/// Fixed serialized size per record outside the variable payloads:
/// id (8) + timestamp (8) + pose (56) + session (4) + score (4)
/// + descriptor length (4) + payload length (4).
pub const RECORD_OVERHEAD_BYTES: usize = 8 + 8 + 56 + 4 + 4 + 4 + 4;
/// Depth block overhead: rows + cols (u16 each) + scale + offset (f32 each).
pub const DEPTH_HEADER_BYTES: usize = 2 + 2 + 4 + 4;
const TRAILER_BYTES: usize = 4;

pub fn size_report(map: &StructureFrameMap) -> SizeReport {
    let mut payload = 0;
    let mut descriptor = 0;
    let mut depth = 0;
    for f in map.frames() {
        payload += f.image_payload.len();
        descriptor += f.descriptor.len() * 4;
        depth += DEPTH_HEADER_BYTES + f.depth.codes.len() * 2;
    }
    let overhead = map.len() * RECORD_OVERHEAD_BYTES;
    let total = HEADER_BYTES + payload + descriptor + depth + overhead + TRAILER_BYTES;
    SizeReport {
        frame_count: map.len(),
        header_bytes: HEADER_BYTES,
        payload_bytes: payload,
        descriptor_bytes: descriptor,
        depth_bytes: depth,
        record_overhead_bytes: overhead,
        trailer_bytes: TRAILER_BYTES,
        total_bytes: total,
        bytes_per_km: if map.route_length_m > 0.0 {
            Some(total as f64 / (map.route_length_m / 1000.0))
        } else {
            None
        },
    }
}
