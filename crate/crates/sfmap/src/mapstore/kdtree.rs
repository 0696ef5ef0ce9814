//! 2D KD-tree over frame positions with lazy deletion.
//!
//! Points are inserted unbalanced (map building visits space roughly in route
//! order, which keeps depth acceptable) and removed by tombstone; the tree
//! rebuilds itself once tombstones outnumber live points.

use nalgebra::Vector2;

#[derive(Debug, Clone)]
struct Node {
    point: Vector2<f64>,
    id: u64,
    deleted: bool,
    left: Option<usize>,
    right: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct KdTree2 {
    nodes: Vec<Node>,
    root: Option<usize>,
    live: usize,
    dead: usize,
}

impl KdTree2 {
    pub fn new() -> Self {
        KdTree2::default()
    }

    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn insert(&mut self, id: u64, point: Vector2<f64>) {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            point,
            id,
            deleted: false,
            left: None,
            right: None,
        });
        self.live += 1;
        let Some(mut cur) = self.root else {
            self.root = Some(idx);
            return;
        };
        let mut axis = 0;
        loop {
            let go_left = key(&point, axis) < key(&self.nodes[cur].point, axis);
            let slot = if go_left {
                self.nodes[cur].left
            } else {
                self.nodes[cur].right
            };
            match slot {
                Some(next) => {
                    cur = next;
                    axis = (axis + 1) % 2;
                }
                None => {
                    if go_left {
                        self.nodes[cur].left = Some(idx);
                    } else {
                        self.nodes[cur].right = Some(idx);
                    }
                    return;
                }
            }
        }
    }

    /// Tombstone the first live node carrying `id`. Returns whether a node
    /// was removed.
    pub fn remove(&mut self, id: u64) -> bool {
        let Some(node) = self
            .nodes
            .iter_mut()
            .find(|n| n.id == id && !n.deleted)
        else {
            return false;
        };
        node.deleted = true;
        self.live -= 1;
        self.dead += 1;
        if self.dead > self.live {
            self.rebuild();
        }
        true
    }

    fn rebuild(&mut self) {
        let pts: Vec<(u64, Vector2<f64>)> = self
            .nodes
            .iter()
            .filter(|n| !n.deleted)
            .map(|n| (n.id, n.point))
            .collect();
        *self = KdTree2::new();
        self.bulk_insert(pts);
    }

    /// Median-split insertion of a batch, producing a balanced subtree.
    fn bulk_insert(&mut self, mut pts: Vec<(u64, Vector2<f64>)>) {
        fn recurse(tree: &mut KdTree2, pts: &mut [(u64, Vector2<f64>)], axis: usize) {
            if pts.is_empty() {
                return;
            }
            let mid = pts.len() / 2;
            pts.sort_by(|a, b| key(&a.1, axis).partial_cmp(&key(&b.1, axis)).unwrap());
            let (id, p) = pts[mid];
            tree.insert(id, p);
            let (lo, hi) = pts.split_at_mut(mid);
            recurse(tree, lo, (axis + 1) % 2);
            recurse(tree, &mut hi[1..], (axis + 1) % 2);
        }
        recurse(self, &mut pts, 0);
    }

    /// Live id closest to `center`, with its distance. None when empty.
    pub fn nearest(&self, center: &Vector2<f64>) -> Option<(u64, f64)> {
        let mut best: Option<(u64, f64)> = None;
        if let Some(root) = self.root {
            self.nearest_search(root, 0, center, &mut best);
        }
        best
    }

    fn nearest_search(
        &self,
        idx: usize,
        axis: usize,
        center: &Vector2<f64>,
        best: &mut Option<(u64, f64)>,
    ) {
        let node = &self.nodes[idx];
        if !node.deleted {
            let d = (node.point - center).norm();
            let better = match best {
                // ties resolve to the lowest id for determinism
                Some((bid, bd)) => d < *bd || (d == *bd && node.id < *bid),
                None => true,
            };
            if better {
                *best = Some((node.id, d));
            }
        }
        let delta = key(center, axis) - key(&node.point, axis);
        let next_axis = (axis + 1) % 2;
        let (near, far) = if delta < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if let Some(n) = near {
            self.nearest_search(n, next_axis, center, best);
        }
        let crossing = best.map_or(true, |(_, bd)| delta.abs() <= bd);
        if crossing {
            if let Some(f) = far {
                self.nearest_search(f, next_axis, center, best);
            }
        }
    }

    /// All live ids within Euclidean distance `radius` of `center`.
    pub fn within_radius(&self, center: &Vector2<f64>, radius: f64) -> Vec<u64> {
        let mut out = Vec::new();
        if let Some(root) = self.root {
            self.search(root, 0, center, radius, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn search(
        &self,
        idx: usize,
        axis: usize,
        center: &Vector2<f64>,
        radius: f64,
        out: &mut Vec<u64>,
    ) {
        let node = &self.nodes[idx];
        if !node.deleted && (node.point - center).norm() <= radius {
            out.push(node.id);
        }
        let delta = key(center, axis) - key(&node.point, axis);
        let next_axis = (axis + 1) % 2;
        if delta < 0.0 {
            if let Some(l) = node.left {
                self.search(l, next_axis, center, radius, out);
            }
            if delta.abs() <= radius {
                if let Some(r) = node.right {
                    self.search(r, next_axis, center, radius, out);
                }
            }
        } else {
            if let Some(r) = node.right {
                self.search(r, next_axis, center, radius, out);
            }
            if delta.abs() <= radius {
                if let Some(l) = node.left {
                    self.search(l, next_axis, center, radius, out);
                }
            }
        }
    }
}

fn key(p: &Vector2<f64>, axis: usize) -> f64 {
    if axis == 0 {
        p.x
    } else {
        p.y
    }
}
