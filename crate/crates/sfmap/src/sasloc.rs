//! Coarse localization against the structure-frame map.
//!
//! A rolling query buffer keeps the last L descriptors with their odometry
//! poses and a similarity row against every map frame. Retrieval either takes
//! the single best descriptor match, pools candidates over a few queries and
//! clusters them spatially, or scores sequence-aware similarity: particles
//! seeded around every map frame drag the odometry trail behind them and
//! average the descriptor distances collected along that virtual trajectory.

use crate::geom::{Pose, Pose2D};
use crate::mapstore::{kdtree::KdTree2, StructureFrameMap};
use nalgebra::{DVector, Vector2};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SasError {
    #[error("descriptor dimension {got} does not match the map's {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("retrieval against an empty map")]
    EmptyMap,
    #[error("retrieval from an empty query buffer")]
    EmptyBuffer,
}

/// Odometry displacement below which a query frame counts as stationary.
pub const STATIONARY_SKIP_M: f64 = 0.5;

/// Spatial linkage radius for candidate clustering, meters.
pub const CLUSTER_LINKAGE_M: f64 = 20.0;

/// Read-only retrieval view of a map: frame ids in column order, ground-plane
/// body poses (camera poses pulled back through the mount extrinsics),
/// descriptors as f64, and a position index.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    pub ids: Vec<u64>,
    col_of: BTreeMap<u64, usize>,
    pub body_poses: Vec<Pose>,
    pub positions: Vec<Vector2<f64>>,
    descriptors: Vec<DVector<f64>>,
    tree: KdTree2,
    dim: usize,
}

impl RetrievalIndex {
    pub fn from_map(map: &StructureFrameMap, cam_in_body: &Pose) -> Self {
        let ext_inv = cam_in_body.inverse();
        let mut ids = Vec::new();
        let mut body_poses = Vec::new();
        let mut positions = Vec::new();
        let mut descriptors = Vec::new();
        let mut tree = KdTree2::new();
        let mut col_of = BTreeMap::new();
        let mut dim = 0;
        for f in map.frames() {
            let body = f.pose.compose(&ext_inv);
            let t = body.translation();
            let p = Vector2::new(t.x, t.y);
            col_of.insert(f.id, ids.len());
            tree.insert(f.id, p);
            ids.push(f.id);
            body_poses.push(body);
            positions.push(p);
            dim = f.descriptor.len();
            descriptors.push(DVector::from_iterator(
                f.descriptor.len(),
                f.descriptor.iter().map(|&x| x as f64),
            ));
        }
        RetrievalIndex {
            ids,
            col_of,
            body_poses,
            positions,
            descriptors,
            tree,
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn column(&self, id: u64) -> Option<usize> {
        self.col_of.get(&id).copied()
    }

    /// Column of the spatially nearest frame to a ground-plane point.
    pub fn nearest_column(&self, p: &Vector2<f64>) -> Option<usize> {
        self.tree.nearest(p).map(|(id, _)| self.col_of[&id])
    }
}

/// One buffered query: descriptor, odometry body pose, and its precomputed
/// similarity row against every map frame.
#[derive(Debug, Clone)]
pub struct QueryEntry {
    pub timestamp: f64,
    pub descriptor: DVector<f64>,
    pub odom_pose: Pose,
    pub row: Vec<f64>,
    pub stationary: bool,
}

/// Ring of the last queries; the retrieval window is the newest entry plus
/// the most recent non-stationary entries before it, up to length L.
#[derive(Debug, Clone)]
pub struct QueryBuffer {
    pub window: usize,
    entries: Vec<QueryEntry>,
}

impl QueryBuffer {
    pub fn new(window: usize) -> Self {
        assert!(window >= 1);
        QueryBuffer {
            window,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append a query and compute its similarity row. Flags the entry as
    /// stationary when it moved less than [`STATIONARY_SKIP_M`] since the
    /// last non-stationary entry.
    pub fn push_query(
        &mut self,
        timestamp: f64,
        descriptor: DVector<f64>,
        odom_pose: Pose,
        index: &RetrievalIndex,
    ) -> Result<(), SasError> {
        if !index.is_empty() && descriptor.len() != index.dim {
            return Err(SasError::DimensionMismatch {
                expected: index.dim,
                got: descriptor.len(),
            });
        }
        let row = index
            .descriptors
            .iter()
            .map(|d| (d - &descriptor).norm())
            .collect();
        let stationary = self
            .entries
            .iter()
            .rev()
            .find(|e| !e.stationary)
            .map(|e| (e.odom_pose.translation() - odom_pose.translation()).norm())
            .is_some_and(|d| d < STATIONARY_SKIP_M);
        self.entries.push(QueryEntry {
            timestamp,
            descriptor,
            odom_pose,
            row,
            stationary,
        });
        // the buffer only ever needs enough history to fill a window
        let keep = 4 * self.window.max(8);
        if self.entries.len() > keep {
            let drop = self.entries.len() - keep;
            self.entries.drain(0..drop);
        }
        Ok(())
    }

    pub fn latest(&self) -> Option<&QueryEntry> {
        self.entries.last()
    }

    /// Window entries newest first: the current entry (even if stationary)
    /// followed by earlier non-stationary entries, at most `window` total.
    pub fn window_entries(&self) -> Vec<&QueryEntry> {
        let mut out = Vec::new();
        let mut it = self.entries.iter().rev();
        if let Some(cur) = it.next() {
            out.push(cur);
        }
        for e in it {
            if out.len() >= self.window {
                break;
            }
            if !e.stationary {
                out.push(e);
            }
        }
        out
    }
}

/// Hypothesis pose seeded around a map frame.
#[derive(Debug, Clone)]
pub struct Particle {
    pub frame_id: u64,
    pub offset: Pose2D,
    /// World pose: frame ground pose composed with the lifted offset.
    pub pose: Pose,
}

/// Default hypothesis offsets: centered, and yawed a third of the camera
/// field of view to either side.
pub fn default_offsets() -> Vec<Pose2D> {
    vec![
        Pose2D::new(0.0, 0.0, 0.0),
        Pose2D::new(0.0, 0.0, -30f64.to_radians()),
        Pose2D::new(0.0, 0.0, 30f64.to_radians()),
    ]
}

/// One particle per (frame, offset), in frame-column then offset order.
pub fn gen_particles(index: &RetrievalIndex, offsets: &[Pose2D]) -> Vec<Particle> {
    let mut out = Vec::with_capacity(index.len() * offsets.len());
    for (col, &id) in index.ids.iter().enumerate() {
        for off in offsets {
            out.push(Particle {
                frame_id: id,
                offset: *off,
                pose: index.body_poses[col].compose(&Pose::from_pose2d(off)),
            });
        }
    }
    out
}

/// The particle's pose trail: the odometry relative of window entry j hung
/// off the particle pose. Entry j = 0 is the particle pose itself.
pub fn virtual_trajectory(particle: &Particle, buf: &QueryBuffer) -> Result<Vec<Pose>, SasError> {
    let window = buf.window_entries();
    let current = window.first().ok_or(SasError::EmptyBuffer)?;
    let cur_inv = current.odom_pose.inverse();
    Ok(window
        .iter()
        .map(|e| particle.pose.compose(&cur_inv.compose(&e.odom_pose)))
        .collect())
}

/// Sequence-aware similarity of one particle: root mean square of the
/// descriptor distances between each window entry and the map frame nearest
/// to the corresponding virtual pose.
pub fn sas_distance(
    particle: &Particle,
    buf: &QueryBuffer,
    index: &RetrievalIndex,
) -> Result<f64, SasError> {
    if index.is_empty() {
        return Err(SasError::EmptyMap);
    }
    let window = buf.window_entries();
    if window.is_empty() {
        return Err(SasError::EmptyBuffer);
    }
    let trail = virtual_trajectory(particle, buf)?;
    let mut sum_sq = 0.0;
    for (entry, pose) in window.iter().zip(trail.iter()) {
        let t = pose.translation();
        let col = index
            .nearest_column(&Vector2::new(t.x, t.y))
            .expect("non-empty index");
        let sigma = entry.row[col];
        sum_sq += sigma * sigma;
    }
    Ok((sum_sq / window.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalMethod {
    Single,
    Cluster,
    Sas,
}

impl std::fmt::Display for RetrievalMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RetrievalMethod::Single => write!(f, "single"),
            RetrievalMethod::Cluster => write!(f, "cluster"),
            RetrievalMethod::Sas => write!(f, "sas"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub frame_id: u64,
    /// Winning distance (descriptor L2 or sequence score, by method).
    pub distance: f64,
    /// Runner-up distance minus winner distance, over distinct frames.
    pub margin: f64,
    pub method: RetrievalMethod,
}

/// Single-shot baseline: nearest map descriptor to the newest query.
pub fn retrieve_single(
    descriptor: &DVector<f64>,
    index: &RetrievalIndex,
) -> Result<RetrievalResult, SasError> {
    if index.is_empty() {
        return Err(SasError::EmptyMap);
    }
    if descriptor.len() != index.dim {
        return Err(SasError::DimensionMismatch {
            expected: index.dim,
            got: descriptor.len(),
        });
    }
    let mut best: Option<(f64, u64)> = None;
    let mut runner = f64::INFINITY;
    for (col, d) in index.descriptors.iter().enumerate() {
        let dist = (d - descriptor).norm();
        let id = index.ids[col];
        match best {
            None => best = Some((dist, id)),
            Some((bd, bid)) => {
                if dist < bd || (dist == bd && id < bid) {
                    runner = bd;
                    best = Some((dist, id));
                } else if dist < runner {
                    runner = dist;
                }
            }
        }
    }
    let (distance, frame_id) = best.unwrap();
    Ok(RetrievalResult {
        frame_id,
        distance,
        margin: if runner.is_finite() {
            runner - distance
        } else {
            0.0
        },
        method: RetrievalMethod::Single,
    })
}

/// Sequence-aware retrieval: minimum sequence score over all particles.
/// Ties break to the lowest frame id, then the earliest offset.
pub fn retrieve_sas(
    buf: &QueryBuffer,
    index: &RetrievalIndex,
    offsets: &[Pose2D],
) -> Result<RetrievalResult, SasError> {
    if index.is_empty() {
        return Err(SasError::EmptyMap);
    }
    let particles = gen_particles(index, offsets);
    let mut best: Option<(f64, u64)> = None;
    // best score per frame, for the runner-up margin
    let mut per_frame: BTreeMap<u64, f64> = BTreeMap::new();
    for p in &particles {
        let s = sas_distance(p, buf, index)?;
        let e = per_frame.entry(p.frame_id).or_insert(f64::INFINITY);
        if s < *e {
            *e = s;
        }
        let better = match best {
            None => true,
            Some((bs, bid)) => s < bs || (s == bs && p.frame_id < bid),
        };
        if better {
            best = Some((s, p.frame_id));
        }
    }
    let (distance, frame_id) = best.unwrap();
    let margin = per_frame
        .iter()
        .filter(|(id, _)| **id != frame_id)
        .map(|(_, s)| *s)
        .fold(f64::INFINITY, f64::min);
    Ok(RetrievalResult {
        frame_id,
        distance,
        margin: if margin.is_finite() {
            margin - distance
        } else {
            0.0
        },
        method: RetrievalMethod::Sas,
    })
}

/// Sequential-clustering baseline: pool the top-n candidates of the current
/// and the previous k queries, cluster them spatially by single linkage, and
/// take the best current-query candidate of the largest cluster.
pub fn retrieve_cluster(
    buf: &QueryBuffer,
    index: &RetrievalIndex,
    k: usize,
    top_n: usize,
) -> Result<RetrievalResult, SasError> {
    if index.is_empty() {
        return Err(SasError::EmptyMap);
    }
    let window = buf.window_entries();
    let current = window.first().ok_or(SasError::EmptyBuffer)?;
    let queries = &window[..window.len().min(k + 1)];
    let mut candidate_cols: Vec<usize> = Vec::new();
    for e in queries {
        let mut cols: Vec<usize> = (0..index.len()).collect();
        cols.sort_by(|&a, &b| {
            e.row[a]
                .partial_cmp(&e.row[b])
                .unwrap()
                .then(index.ids[a].cmp(&index.ids[b]))
        });
        candidate_cols.extend(cols.into_iter().take(top_n));
    }
    candidate_cols.sort_unstable();
    candidate_cols.dedup();

    // single-linkage clustering over candidate positions
    let n = candidate_cols.len();
    let mut cluster = vec![usize::MAX; n];
    let mut next = 0;
    for i in 0..n {
        if cluster[i] != usize::MAX {
            continue;
        }
        cluster[i] = next;
        let mut stack = vec![i];
        while let Some(a) = stack.pop() {
            for b in 0..n {
                if cluster[b] == usize::MAX
                    && (index.positions[candidate_cols[a]] - index.positions[candidate_cols[b]])
                        .norm()
                        <= CLUSTER_LINKAGE_M
                {
                    cluster[b] = next;
                    stack.push(b);
                }
            }
        }
        next += 1;
    }
    let mut sizes = vec![0usize; next];
    for &c in &cluster {
        sizes[c] += 1;
    }
    // largest cluster; ties resolve to the one holding the best current match
    let mut best_cluster = 0;
    for c in 1..next {
        let better = sizes[c] > sizes[best_cluster] || {
            sizes[c] == sizes[best_cluster] && {
                let best_in = |cl: usize| {
                    candidate_cols
                        .iter()
                        .zip(&cluster)
                        .filter(|(_, cc)| **cc == cl)
                        .map(|(col, _)| current.row[*col])
                        .fold(f64::INFINITY, f64::min)
                };
                best_in(c) < best_in(best_cluster)
            }
        };
        if better {
            best_cluster = c;
        }
    }
    let (col, distance) = candidate_cols
        .iter()
        .zip(&cluster)
        .filter(|(_, c)| **c == best_cluster)
        .map(|(col, _)| (*col, current.row[*col]))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(index.ids[a.0].cmp(&index.ids[b.0])))
        .unwrap();
    let runner = candidate_cols
        .iter()
        .filter(|&&c| index.ids[c] != index.ids[col])
        .map(|&c| current.row[c])
        .fold(f64::INFINITY, f64::min);
    Ok(RetrievalResult {
        frame_id: index.ids[col],
        distance,
        margin: if runner.is_finite() {
            runner - distance
        } else {
            0.0
        },
        method: RetrievalMethod::Cluster,
    })
}
