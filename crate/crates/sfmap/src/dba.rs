//! Dense-bundle-adjustment math on the /8 grid.
//!
//! Flow residuals over co-visible frame pairs are linearized into Jacobians
//! w.r.t. the two camera poses and the source frame's inverse depths, stacked
//! per source frame into a bordered Hessian, and the depth block is eliminated
//! by Schur complement into a pose-only constraint. Depths are recovered later
//! by back-substitution once the poses have been corrected.
//!
//! Pose convention: all `Pose` arguments here are camera-to-world, so the
//! source-to-target camera transform is `T_j^-1 * T_i`.

use crate::geom::{
    backproject, project, project_jacobian, se3_exp, CameraIntrinsics, Pose, Twist, LAMBDA_MAX,
    LAMBDA_MIN,
};
use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DbaError {
    #[error("grid/flow dimensions do not match the camera model: {0}")]
    DimensionMismatch(String),
    #[error("no pair systems supplied for frame assembly")]
    EmptyPairSet,
    #[error("pose update count {got} does not match constraint frame count {want}")]
    IndexMismatch { got: usize, want: usize },
}

/// Damping added to the depth-block diagonal before inversion.
pub const C_DAMPING: f64 = 1e-6;

/// Per-grid-cell inverse depth, 1/meters, sampled at pixel centers (8c+4, 8r+4).
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDepthGrid {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl InverseDepthGrid {
    pub fn new(rows: usize, cols: usize, value: f64) -> Self {
        InverseDepthGrid {
            rows,
            cols,
            values: vec![value.clamp(LAMBDA_MIN, LAMBDA_MAX); rows * cols],
        }
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols);
        let values = values
            .into_iter()
            .map(|v| v.clamp(LAMBDA_MIN, LAMBDA_MAX))
            .collect();
        InverseDepthGrid { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn at(&self, cell: usize) -> f64 {
        self.values[cell]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.cols + col] = v.clamp(LAMBDA_MIN, LAMBDA_MAX);
    }

    /// Apply additive updates with clamping to the valid range.
    pub fn apply_update(&mut self, delta: &DVector<f64>) {
        assert_eq!(delta.len(), self.values.len());
        for (v, d) in self.values.iter_mut().zip(delta.iter()) {
            *v = (*v + d).clamp(LAMBDA_MIN, LAMBDA_MAX);
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn matches(&self, k: &CameraIntrinsics) -> bool {
        self.rows == k.grid_rows() && self.cols == k.grid_cols()
    }
}

/// Residual optical flow with per-cell 2-vector confidence weights.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub rows: usize,
    pub cols: usize,
    /// Residual flow per cell, pixels.
    pub flow: Vec<Vector2<f64>>,
    /// Information weights per cell (x, y); invalid cells carry zero weight.
    pub weight: Vec<Vector2<f64>>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FlowField {
            rows,
            cols,
            flow: vec![Vector2::zeros(); rows * cols],
            weight: vec![Vector2::new(1.0, 1.0); rows * cols],
            valid: vec![true; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.flow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flow.is_empty()
    }
}

/// Linearized system of one source-to-target pair: 2n rows.
///
/// Rows are pre-scaled by sqrt of the flow weights; invalid cells contribute
/// zero rows so matrix shapes stay static.
#[derive(Debug, Clone)]
pub struct PairSystem {
    pub source: u64,
    pub target: u64,
    /// 2n x 6 Jacobian w.r.t. the source pose (right perturbation).
    pub j_i: DMatrix<f64>,
    /// 2n x 6 Jacobian w.r.t. the target pose.
    pub j_j: DMatrix<f64>,
    /// Per-cell 2x1 depth Jacobian blocks (block-diagonal structure).
    pub j_lam: Vec<Vector2<f64>>,
    /// Weighted residual flow, 2n.
    pub residual: DVector<f64>,
}

/// Frame-stacked normal-equation blocks for one source frame.
#[derive(Debug, Clone)]
pub struct FrameSystem {
    /// Frame ids covered by the pose block, in stacking order.
    pub frames: Vec<u64>,
    /// 6N x 6N pose block.
    pub b: DMatrix<f64>,
    /// 6N x n pose-depth coupling.
    pub d: DMatrix<f64>,
    /// Diagonal of the n x n depth block.
    pub c_diag: DVector<f64>,
    /// Pose right-hand side, 6N.
    pub v: DVector<f64>,
    /// Depth right-hand side, n.
    pub z: DVector<f64>,
}

/// Schur-reduced pose constraint with the pieces needed to recover depths.
#[derive(Debug, Clone)]
pub struct DBAConstraint {
    pub frames: Vec<u64>,
    /// 6N x 6N reduced Hessian, symmetric PSD.
    pub h_c: DMatrix<f64>,
    /// 6N reduced right-hand side.
    pub v_c: DVector<f64>,
    /// Camera poses at the linearization point, one per frame.
    pub lin_poses: Vec<Pose>,
    /// Damped depth-block diagonal retained for back-substitution.
    pub c_diag: DVector<f64>,
    pub d: DMatrix<f64>,
    pub z: DVector<f64>,
}

/// Dense rigid flow of the source grid into the target view.
///
/// Returns the target-image pixel of every source grid cell plus a validity
/// mask (cheirality and image bounds).
pub fn rigid_flow(
    t_i: &Pose,
    t_j: &Pose,
    lam_i: &InverseDepthGrid,
    k: &CameraIntrinsics,
) -> Result<(Vec<Vector2<f64>>, Vec<bool>), DbaError> {
    if !lam_i.matches(k) {
        return Err(DbaError::DimensionMismatch(format!(
            "grid {}x{} vs camera {}x{}",
            lam_i.rows,
            lam_i.cols,
            k.grid_rows(),
            k.grid_cols()
        )));
    }
    let t_ji = t_j.inverse().compose(t_i);
    let n = lam_i.len();
    let mut flow = vec![Vector2::zeros(); n];
    let mut valid = vec![false; n];
    for row in 0..lam_i.rows {
        for col in 0..lam_i.cols {
            let cell = row * lam_i.cols + col;
            let pix = k.grid_pixel(row, col);
            let lam = lam_i.get(row, col);
            let p_i = match backproject(k, &pix, lam) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let p_j = t_ji.transform(&p_i);
            let (u, ok) = project(k, &p_j);
            flow[cell] = u;
            valid[cell] = ok;
        }
    }
    Ok((flow, valid))
}

/// Linearize the flow residual of one pair at the given poses and depths.
pub fn linearize_pair(
    t_i: &Pose,
    t_j: &Pose,
    lam_i: &InverseDepthGrid,
    flow: &FlowField,
    k: &CameraIntrinsics,
    source: u64,
    target: u64,
) -> Result<PairSystem, DbaError> {
    if !lam_i.matches(k) || flow.rows != lam_i.rows || flow.cols != lam_i.cols {
        return Err(DbaError::DimensionMismatch(

            format!("flow {}x{} vs grid {}x{}", flow.rows, flow.cols, lam_i.rows, lam_i.cols),
        ));
    }
    let t_ji = t_j.inverse().compose(t_i);
    let r_ji: Matrix3<f64> = t_ji.rotation_matrix();
    let n = lam_i.len();
    let mut j_i = DMatrix::zeros(2 * n, 6);
    let mut j_j = DMatrix::zeros(2 * n, 6);
    let mut j_lam = vec![Vector2::zeros(); n];
    let mut residual = DVector::zeros(2 * n);

    for row in 0..lam_i.rows {
        for col in 0..lam_i.cols {
            let cell = row * lam_i.cols + col;
            if !flow.valid[cell] {
                continue;
            }
            let pix = k.grid_pixel(row, col);
            let lam = lam_i.get(row, col);
            let p_i = match backproject(k, &pix, lam) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let p_j = t_ji.transform(&p_i);
            let (_, ok) = project(k, &p_j);
            if !ok {
                continue;
            }
            let dpix: Matrix2x3<f64> = project_jacobian(k, &p_j);
            // target pose right perturbation: d p_j = -rho + skew(p_j) phi
            // source pose right perturbation: d p_j = R_ji (rho - skew(p_i) phi)... sign below
            let dp_dxi_j_t: Matrix3<f64> = -Matrix3::identity();
            let dp_dphi_j: Matrix3<f64> = crate::geom::skew(&p_j);
            let dp_drho_i: Matrix3<f64> = r_ji;
            let dp_dphi_i: Matrix3<f64> = -r_ji * crate::geom::skew(&p_i);
            let dlam: Vector3<f64> = r_ji * (-p_i / lam);

            let w = flow.weight[cell];
            let sw = Vector2::new(w.x.max(0.0).sqrt(), w.y.max(0.0).sqrt());
            for axis in 0..2 {
                let r_idx = 2 * cell + axis;
                let g = dpix.row(axis);
                for c in 0..3 {
                    let gi_rho = g[0] * dp_drho_i[(0, c)] + g[1] * dp_drho_i[(1, c)] + g[2] * dp_drho_i[(2, c)];
                    let gi_phi = g[0] * dp_dphi_i[(0, c)] + g[1] * dp_dphi_i[(1, c)] + g[2] * dp_dphi_i[(2, c)];
                    let gj_rho = g[0] * dp_dxi_j_t[(0, c)] + g[1] * dp_dxi_j_t[(1, c)] + g[2] * dp_dxi_j_t[(2, c)];
                    let gj_phi = g[0] * dp_dphi_j[(0, c)] + g[1] * dp_dphi_j[(1, c)] + g[2] * dp_dphi_j[(2, c)];
                    j_i[(r_idx, c)] = sw[axis] * gi_rho;
                    j_i[(r_idx, 3 + c)] = sw[axis] * gi_phi;
                    j_j[(r_idx, c)] = sw[axis] * gj_rho;
                    j_j[(r_idx, 3 + c)] = sw[axis] * gj_phi;
                }
                let gl = g[0] * dlam[0] + g[1] * dlam[1] + g[2] * dlam[2];
                j_lam[cell][axis] = sw[axis] * gl;
                residual[r_idx] = sw[axis] * flow.flow[cell][axis];
            }
        }
    }

    Ok(PairSystem {
        source,
        target,
        j_i,
        j_j,
        j_lam,
        residual,
    })
}

/// Stack pair systems sharing a source frame into bordered normal equations.
///
/// `frames` fixes the pose stacking order and must contain every source and
/// target id.
pub fn assemble_frame_system(pairs: &[PairSystem], frames: &[u64]) -> Result<FrameSystem, DbaError> {
    if pairs.is_empty() {
        return Err(DbaError::EmptyPairSet);
    }
    let source = pairs[0].source;
    assert!(
        pairs.iter().all(|p| p.source == source),
        "all pairs must share the source frame"
    );
    let n = pairs[0].j_lam.len();
    let np = frames.len();
    let idx_of = |id: u64| -> usize {
        frames
            .iter()
            .position(|&f| f == id)
            .expect("pair references a frame missing from the stacking order")
    };

    let mut b = DMatrix::zeros(6 * np, 6 * np);
    let mut d = DMatrix::zeros(6 * np, n);
    let mut c_diag = DVector::zeros(n);
    let mut v = DVector::zeros(6 * np);
    let mut z = DVector::zeros(n);

    for pair in pairs {
        assert_eq!(pair.j_lam.len(), n, "pair grids must agree in size");
        let si = idx_of(pair.source) * 6;
        let ti = idx_of(pair.target) * 6;
        // per-row accumulation keeps the reduction order fixed (pair order,
        // then cell order), so results are reproducible.
        for cell in 0..n {
            let jl = pair.j_lam[cell];
            for axis in 0..2 {
                let r = 2 * cell + axis;
                let res = pair.residual[r];
                let jlv = jl[axis];
                c_diag[cell] += jlv * jlv;
                z[cell] += jlv * res;
                for a in 0..6 {
                    let ji_a = pair.j_i[(r, a)];
                    let jj_a = pair.j_j[(r, a)];
                    v[si + a] += ji_a * res;
                    v[ti + a] += jj_a * res;
                    d[(si + a, cell)] += ji_a * jlv;
                    d[(ti + a, cell)] += jj_a * jlv;
                    for bcol in 0..6 {
                        b[(si + a, si + bcol)] += ji_a * pair.j_i[(r, bcol)];
                        b[(si + a, ti + bcol)] += ji_a * pair.j_j[(r, bcol)];
                        b[(ti + a, si + bcol)] += jj_a * pair.j_i[(r, bcol)];
                        b[(ti + a, ti + bcol)] += jj_a * pair.j_j[(r, bcol)];
                    }
                }
            }
        }
    }

    Ok(FrameSystem {
        frames: frames.to_vec(),
        b,
        d,
        c_diag,
        v,
        z,
    })
}

/// Eliminate the depth block: `H_c = B - D C^-1 D^T`, `v_c = v - D C^-1 z`.
///
/// The depth diagonal is damped by [`C_DAMPING`] before inversion; the damped
/// diagonal, coupling and depth right-hand side are retained so depths can be
/// recovered by [`depth_backsub`].
pub fn schur_reduce(sys: &FrameSystem, lin_poses: &[Pose]) -> DBAConstraint {
    assert_eq!(lin_poses.len(), sys.frames.len());
    let n = sys.c_diag.len();
    let mut c_damped = sys.c_diag.clone();
    for i in 0..n {
        c_damped[i] += C_DAMPING;
    }
    // D * C^-1
    let mut dcinv = sys.d.clone();
    for i in 0..n {
        let inv = 1.0 / c_damped[i];
        for r in 0..dcinv.nrows() {
            dcinv[(r, i)] *= inv;
        }
    }
    let mut h_c = &sys.b - &dcinv * sys.d.transpose();
    let v_c = &sys.v - &dcinv * &sys.z;
    // symmetrize against accumulated round-off
    let ht = h_c.transpose();
    h_c = (h_c + ht) * 0.5;
    DBAConstraint {
        frames: sys.frames.clone(),
        h_c,
        v_c,
        lin_poses: lin_poses.to_vec(),
        c_diag: c_damped,
        d: sys.d.clone(),
        z: sys.z.clone(),
    }
}

/// Recover depth updates from solved pose updates: `dlam = C^-1 (z - D^T xi)`.
pub fn depth_backsub(
    constraint: &DBAConstraint,
    pose_updates: &[Twist],
) -> Result<DVector<f64>, DbaError> {
    if pose_updates.len() != constraint.frames.len() {
        return Err(DbaError::IndexMismatch {
            got: pose_updates.len(),
            want: constraint.frames.len(),
        });
    }
    let mut xi = DVector::zeros(6 * pose_updates.len());
    for (i, t) in pose_updates.iter().enumerate() {
        let a = t.to_array();
        for c in 0..6 {
            xi[6 * i + c] = a[c];
        }
    }
    let rhs = &constraint.z - constraint.d.transpose() * xi;
    let mut dlam = rhs;
    for i in 0..dlam.len() {
        dlam[i] /= constraint.c_diag[i];
    }
    Ok(dlam)
}

/// One-directional view overlap: fraction of source grid cells that project
/// validly into the target view.
pub fn overlap_ratio(
    t_i: &Pose,
    t_j: &Pose,
    lam_i: &InverseDepthGrid,
    k: &CameraIntrinsics,
) -> f64 {
    match rigid_flow(t_i, t_j, lam_i, k) {
        Ok((_, valid)) => valid.iter().filter(|&&v| v).count() as f64 / valid.len() as f64,
        Err(_) => 0.0,
    }
}

/// Bi-directional co-visibility in [0, 1]: min of both overlap directions.
///
/// Counting happens on the /8 grid, which matches the resolution the flow is
/// computed at.
pub fn covisibility(
    t_i: &Pose,
    t_j: &Pose,
    lam_i: &InverseDepthGrid,
    lam_j: &InverseDepthGrid,
    k: &CameraIntrinsics,
) -> f64 {
    overlap_ratio(t_i, t_j, lam_i, k).min(overlap_ratio(t_j, t_i, lam_j, k))
}

/// Gauss-Newton step of a single assembled frame system with the depth block
/// retained (the "full joint solve"). Test oracle shared with the acceptance
/// suite; damps B and C identically to the reduced path.
pub fn joint_solve(
    sys: &FrameSystem,
    pose_prior: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let np = sys.b.nrows();
    let n = sys.c_diag.len();
    let dim = np + n;
    let mut h = DMatrix::zeros(dim, dim);
    h.view_mut((0, 0), (np, np)).copy_from(&sys.b);
    h.view_mut((0, np), (np, n)).copy_from(&sys.d);
    h.view_mut((np, 0), (n, np)).copy_from(&sys.d.transpose());
    for i in 0..n {
        h[(np + i, np + i)] = sys.c_diag[i] + C_DAMPING;
    }
    for i in 0..np {
        h[(i, i)] += pose_prior;
    }
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, np).copy_from(&sys.v);
    rhs.rows_mut(np, n).copy_from(&sys.z);
    let chol = h.cholesky()?;
    let sol = chol.solve(&rhs);
    Some((sol.rows(0, np).into(), sol.rows(np, n).into()))
}

/// Solve the reduced pose system with the same pose prior as [`joint_solve`].
pub fn reduced_solve(constraint: &DBAConstraint, pose_prior: f64) -> Option<DVector<f64>> {
    let mut h = constraint.h_c.clone();
    for i in 0..h.nrows() {
        h[(i, i)] += pose_prior;
    }
    Some(h.cholesky()?.solve(&constraint.v_c))
}

/// Pose updates as twists from a stacked 6N vector.
pub fn split_twists(xi: &DVector<f64>) -> Vec<Twist> {
    xi.as_slice().chunks(6).map(Twist::from_slice).collect()
}

/// Retract stacked pose updates onto linearization poses.
pub fn retract_poses(lin: &[Pose], xi: &DVector<f64>) -> Vec<Pose> {
    split_twists(xi)
        .iter()
        .zip(lin.iter())
        .map(|(t, p)| p.compose(&se3_exp(t)))
        .collect()
}
