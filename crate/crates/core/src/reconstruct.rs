//! Vertex positions from per-vertex deformation gradients by one sparse
//! least-squares solve, and linear interpolation in feature space.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};

use crate::defgrad::{edge_moment, Mat3};
use crate::error::{Error, Result};
use crate::mesh::{save_obj, Mesh, Vec3};
use crate::tsacap::{gradients, FeatureFrame, FEATURE_DIM};

/// Which least-squares energy ties the positions to the gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Energy {
    /// `Σ_i ‖(Σ_j c_ij ((p_i − p_j) − T_i e_ij) e_ijᵀ)‖²_F / tr(A_i)²`: the
    /// residual of the per-vertex gradient fit's normal equations. Positions
    /// whose fitted gradients equal `T` are an exact minimizer.
    #[default]
    GradientMatch,
    /// `Σ_i Σ_j c_ij ‖(p_i − p_j) − T_i e_ij‖²`: each one-ring edge matches its
    /// vertex's gradient. Exact only for piecewise-affine deformations.
    EdgeResidual,
}

/// A reusable factorization of the reconstruction system of one reference
/// mesh. The system matrix depends only on the reference geometry, so every
/// frame of a sequence shares it.
pub struct Reconstructor {
    reference: Mesh,
    energy: Energy,
    anchor: usize,
    /// Maps vertex index to its row among the unknowns (`None` for the anchor).
    free_index: Vec<Option<usize>>,
    /// Column of the full system matrix belonging to the anchor, restricted
    /// to free rows.
    anchor_column: Vec<f64>,
    solver: Solver,
    moments: Vec<Mat3>,
    row_scale: Vec<f64>,
}

impl std::fmt::Debug for Reconstructor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Reconstructor")
            .field("vertices", &self.reference.vertex_count())
            .field("energy", &self.energy)
            .field("anchor", &self.anchor)
            .finish()
    }
}

impl Reconstructor {
    pub fn new(reference: &Mesh, energy: Energy, anchor: usize) -> Result<Self> {
        if !reference.has_weights() {
            return Err(Error::Structure("cotangent weights have not been computed".into()));
        }
        let n = reference.vertex_count();
        if anchor >= n {
            return Err(Error::Shape(format!("anchor {anchor} is not a vertex of a {n}-vertex mesh")));
        }
        if let Some(v) = unreachable_vertex(reference, anchor) {
            return Err(Error::Connectivity(format!(
                "vertex {v} is not connected to anchor vertex {anchor}"
            )));
        }
        let free_index: Vec<Option<usize>> = (0..n)
            .scan(0usize, |next, v| {
                Some(if v == anchor {
                    None
                } else {
                    *next += 1;
                    Some(*next - 1)
                })
            })
            .collect();
        let rest = reference.vertices();
        let moments: Vec<Mat3> = (0..n).map(|i| edge_moment(reference, rest, i)).collect();
        let row_scale: Vec<f64> = moments
            .iter()
            .map(|a| {
                let tr = a.trace().abs();
                if tr > 0.0 {
                    1.0 / tr
                } else {
                    1.0
                }
            })
            .collect();

        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        match energy {
            Energy::EdgeResidual => {
                for (i, j) in reference.edges() {
                    let c = reference.weight(i, j).expect("edge weight");
                    // Both directed terms (i→j and j→i) contribute.
                    let w = 2.0 * c;
                    triplets.extend([(i, i, w), (j, j, w), (i, j, -w), (j, i, -w)]);
                }
            }
            Energy::GradientMatch => {
                for i in 0..n {
                    for d in 0..3 {
                        let row = gradient_row(reference, i, d, row_scale[i]);
                        for &(a, wa) in &row {
                            for &(b, wb) in &row {
                                triplets.push((a, b, wa * wb));
                            }
                        }
                    }
                }
            }
        }

        let m = n - 1;
        let mut coo = CooMatrix::new(m, m);
        let mut anchor_column = vec![0.0; m];
        for (a, b, w) in triplets {
            match (free_index[a], free_index[b]) {
                (Some(fa), Some(fb)) => coo.push(fa, fb, w),
                (Some(fa), None) => anchor_column[fa] += w,
                _ => {}
            }
        }
        let csc = CscMatrix::from(&coo);
        let solver = match CscCholesky::factor(&csc) {
            Ok(f) => Solver::Cholesky(f),
            Err(_) => Solver::ConjugateGradient(csc),
        };
        Ok(Reconstructor {
            reference: reference.clone(),
            energy,
            anchor,
            free_index,
            anchor_column,
            solver,
            moments,
            row_scale,
        })
    }

    pub fn energy(&self) -> Energy {
        self.energy
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    /// Positions for the gradients `T_i = R_i S_i` unpacked from `frame`.
    pub fn reconstruct(&self, frame: &FeatureFrame, anchor_position: Vec3) -> Result<Vec<Vec3>> {
        self.reconstruct_gradients(&gradients(frame)?, anchor_position)
    }

    pub fn reconstruct_gradients(&self, grads: &[Mat3], anchor_position: Vec3) -> Result<Vec<Vec3>> {
        let n = self.reference.vertex_count();
        if grads.len() != n {
            return Err(Error::Shape(format!("{} gradients for {n} vertices", grads.len())));
        }
        let rest = self.reference.vertices();
        let mut rhs = DMatrix::<f64>::zeros(n, 3);
        match self.energy {
            Energy::EdgeResidual => {
                for i in 0..n {
                    for (&j, &c) in self.reference.neighbors(i).iter().zip(self.reference.neighbor_weights(i)) {
                        let target = c * grads[i] * (rest[i] - rest[j]);
                        for k in 0..3 {
                            rhs[(i, k)] += target[k];
                            rhs[(j, k)] -= target[k];
                        }
                    }
                }
            }
            Energy::GradientMatch => {
                for i in 0..n {
                    let target = grads[i] * self.moments[i] * self.row_scale[i];
                    for d in 0..3 {
                        for (a, w) in gradient_row(&self.reference, i, d, self.row_scale[i]) {
                            for k in 0..3 {
                                rhs[(a, k)] += w * target[(k, d)];
                            }
                        }
                    }
                }
            }
        }
        let m = n - 1;
        let mut reduced = DMatrix::<f64>::zeros(m, 3);
        for v in 0..n {
            if let Some(f) = self.free_index[v] {
                for k in 0..3 {
                    reduced[(f, k)] = rhs[(v, k)] - self.anchor_column[f] * anchor_position[k];
                }
            }
        }
        let solution = match &self.solver {
            Solver::Cholesky(f) => f.solve(&reduced),
            Solver::ConjugateGradient(a) => {
                let mut x = DMatrix::<f64>::zeros(m, 3);
                for k in 0..3 {
                    let b: Vec<f64> = reduced.column(k).iter().copied().collect();
                    let col = conjugate_gradient(a, &b, CG_TOLERANCE, 10 * n)?;
                    x.column_mut(k).copy_from_slice(&col);
                }
                x
            }
        };
        let out: Vec<Vec3> = (0..n)
            .map(|v| match self.free_index[v] {
                Some(f) => Vec3::new(solution[(f, 0)], solution[(f, 1)], solution[(f, 2)]),
                None => anchor_position,
            })
            .collect();
        if out.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("reconstructed positions"));
        }
        Ok(out)
    }
}

enum Solver {
    Cholesky(CscCholesky<f64>),
    ConjugateGradient(CscMatrix<f64>),
}

pub const CG_TOLERANCE: f64 = 1e-10;

fn spmv(a: &CscMatrix<f64>, x: &[f64], y: &mut [f64]) {
    y.iter_mut().for_each(|v| *v = 0.0);
    for (j, col) in (0..a.ncols()).map(|j| (j, a.col(j))) {
        let xj = x[j];
        for (&i, &v) in col.row_indices().iter().zip(col.values()) {
            y[i] += v * xj;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Plain CG on a symmetric matrix; stops when `‖r‖ ≤ tol·max(‖b‖, 1)`.
pub(crate) fn conjugate_gradient(a: &CscMatrix<f64>, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let target = tol * dot(b, b).sqrt().max(1.0);
    for _ in 0..max_iter.max(1) {
        if rr.sqrt() <= target {
            return Ok(x);
        }
        spmv(a, &p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Connectivity("reconstruction system is not positive definite".into()));
        }
        let alpha = rr / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let next = dot(&r, &r);
        let beta = next / rr;
        rr = next;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
    }
    if rr.sqrt() <= target {
        Ok(x)
    } else {
        Err(Error::Divergence {
            epoch: max_iter,
            loss: rr.sqrt(),
        })
    }
}

fn unreachable_vertex(mesh: &Mesh, anchor: usize) -> Option<usize> {
    let mut seen = vec![false; mesh.vertex_count()];
    let mut stack = vec![anchor];
    seen[anchor] = true;
    while let Some(v) = stack.pop() {
        for &w in mesh.neighbors(v) {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen.iter().position(|s| !s)
}

/// Sparse row `d` of vertex `i`'s fit operator: `Σ_j s c_ij e_ij[d] (u_i − u_j)`.
fn gradient_row(mesh: &Mesh, i: usize, d: usize, scale: f64) -> Vec<(usize, f64)> {
    let rest = mesh.vertices();
    let mut row = Vec::with_capacity(mesh.neighbors(i).len() + 1);
    let mut diag = 0.0;
    for (&j, &c) in mesh.neighbors(i).iter().zip(mesh.neighbor_weights(i)) {
        let w = scale * c * (rest[i] - rest[j])[d];
        diag += w;
        row.push((j, -w));
    }
    row.push((i, diag));
    row
}

/// One-shot reconstruction with the default energy.
pub fn reconstruct_frame(reference: &Mesh, frame: &FeatureFrame, anchor: (usize, Vec3)) -> Result<Vec<Vec3>> {
    Reconstructor::new(reference, Energy::default(), anchor.0)?.reconstruct(frame, anchor.1)
}

/// Writes `frame_%05d.obj` for every frame into `dir`, creating it if needed.
pub fn write_sequence(dir: impl AsRef<Path>, frames: &[Vec<Vec3>], faces: &[[usize; 3]]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(t, positions)| {
            let path = dir.join(frame_file_name(t));
            save_obj(&path, positions, faces)?;
            Ok(path)
        })
        .collect()
}

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:05}.obj")
}

/// `steps + 1` evenly spaced frames from `a` (t = 0) to `b` (t = 1).
pub fn interpolate_sequence(a: &FeatureFrame, b: &FeatureFrame, steps: usize) -> Result<Vec<FeatureFrame>> {
    let steps = steps.max(1);
    (0..=steps).map(|k| interpolate(a, b, k as f64 / steps as f64)).collect()
}

/// Component-wise `(1 − t)·a + t·b` of two feature frames.
pub fn interpolate(a: &FeatureFrame, b: &FeatureFrame, t: f64) -> Result<FeatureFrame> {
    if a.vertex_count() != b.vertex_count() {
        return Err(Error::Shape(format!(
            "cannot interpolate {} and {} vertices",
            a.vertex_count(),
            b.vertex_count()
        )));
    }
    Ok(FeatureFrame {
        vectors: a
            .vectors
            .iter()
            .zip(&b.vectors)
            .map(|(va, vb)| {
                let mut out = [0.0; FEATURE_DIM];
                for k in 0..FEATURE_DIM {
                    out[k] = (1.0 - t) * va[k] + t * vb[k];
                }
                out
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defgrad::rotation;
    use crate::mesh::{grid, MeshSequence};
    use crate::tsacap::{encode_sequence, ResolveConfig};
    use std::f64::consts::PI;

    fn max_err(a: &[Vec3], b: &[Vec3]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    fn encode_one(mesh: &Mesh, frame: Vec<Vec3>) -> FeatureFrame {
        let seq = MeshSequence::new(mesh.clone(), vec![mesh.vertices().to_vec(), frame]).unwrap();
        encode_sequence(&seq, &ResolveConfig::default()).unwrap().features.frames[1].clone()
    }

    #[test]
    fn identity_features_reproduce_reference() {
        let mesh = grid(5, 5, 1.0, 1.0).unwrap();
        for energy in [Energy::GradientMatch, Energy::EdgeResidual] {
            let rec = Reconstructor::new(&mesh, energy, 0).unwrap();
            let out = rec.reconstruct(&FeatureFrame::identity(25), mesh.vertices()[0]).unwrap();
            assert!(max_err(&out, mesh.vertices()) < 1e-9, "{energy:?}");
        }
    }

    #[test]
    fn rigid_rotation_round_trip() {
        let mesh = grid(6, 5, 1.0, 0.8).unwrap();
        let rot = rotation(&Vec3::new(1.0, 2.0, 0.5), 2.5);
        let shift = Vec3::new(0.3, -0.1, 2.0);
        let moved: Vec<Vec3> = mesh.vertices().iter().map(|p| rot * p + shift).collect();
        let features = encode_one(&mesh, moved.clone());
        for energy in [Energy::GradientMatch, Energy::EdgeResidual] {
            let rec = Reconstructor::new(&mesh, energy, 0).unwrap();
            let out = rec.reconstruct(&features, moved[0]).unwrap();
            assert!(max_err(&out, &moved) < 1e-8, "{energy:?}: {}", max_err(&out, &moved));
        }
    }

    #[test]
    fn smooth_bend_round_trip_is_exact_for_gradient_match() {
        let mesh = grid(9, 9, 1.0, 1.0).unwrap();
        let bent: Vec<Vec3> = mesh
            .vertices()
            .iter()
            .map(|p| {
                let k = 2.0;
                let a = k * p.x;
                Vec3::new(a.sin() / k, p.y, (1.0 - a.cos()) / k + 0.1 * (PI * p.y).sin())
            })
            .collect();
        let features = encode_one(&mesh, bent.clone());
        let diag = Mesh::bbox_diagonal(&bent);
        let exact = Reconstructor::new(&mesh, Energy::GradientMatch, 0).unwrap();
        let err = max_err(&exact.reconstruct(&features, bent[0]).unwrap(), &bent);
        assert!(err < 1e-6 * diag, "gradient match error {err}");
        let edge = Reconstructor::new(&mesh, Energy::EdgeResidual, 0).unwrap();
        let err_edge = max_err(&edge.reconstruct(&features, bent[0]).unwrap(), &bent);
        eprintln!("bend round trip: gradient match {err:e}, edge residual {err_edge:e}");
    }

    #[test]
    fn anchor_shift_translates_everything() {
        let mesh = grid(5, 4, 1.0, 1.0).unwrap();
        let frame: Vec<Vec3> = mesh.vertices().iter().map(|p| p + Vec3::new(0.0, 0.0, 0.2 * p.x * p.x)).collect();
        let features = encode_one(&mesh, frame.clone());
        let rec = Reconstructor::new(&mesh, Energy::default(), 0).unwrap();
        let a = rec.reconstruct(&features, Vec3::zeros()).unwrap();
        let d = Vec3::new(1.5, -2.0, 0.25);
        let b = rec.reconstruct(&features, d).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert!((pb - pa - d).norm() < 1e-12);
        }
    }

    #[test]
    fn disconnected_mesh_is_a_connectivity_error() {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(5.0, 0.0, 0.0),
            Vec3::new(6.0, 0.0, 0.0),
            Vec3::new(5.0, 1.0, 0.0),
        ];
        let mesh = Mesh::with_weights(v, vec![[0, 1, 2], [3, 4, 5]]).unwrap();
        for energy in [Energy::GradientMatch, Energy::EdgeResidual] {
            let err = Reconstructor::new(&mesh, energy, 0).unwrap_err();
            assert!(matches!(err, Error::Connectivity(_)), "{err}");
        }
    }

    #[test]
    fn interpolation_endpoints_and_linearity() {
        let a = FeatureFrame::identity(3);
        let mut b = FeatureFrame::identity(3);
        for v in &mut b.vectors {
            v[2] = 3.0 * PI;
        }
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        let mid = interpolate(&a, &b, 1.0 / 3.0).unwrap();
        for v in &mid.vectors {
            assert!((v[2] - PI).abs() < 1e-12);
        }
        assert!(interpolate(&a, &FeatureFrame::identity(4), 0.5).is_err());
    }

    #[test]
    fn conjugate_gradient_matches_cholesky() {
        let mesh = grid(7, 6, 1.0, 1.0).unwrap();
        let rec = Reconstructor::new(&mesh, Energy::GradientMatch, 0).unwrap();
        let Solver::Cholesky(_) = rec.solver else { panic!("expected a factorization") };
        let frame: Vec<Vec3> = mesh.vertices().iter().map(|p| Vec3::new(p.x, p.y, 0.3 * (p.x * 2.0).sin() * p.y)).collect();
        let features = encode_one(&mesh, frame.clone());
        let direct = rec.reconstruct(&features, frame[0]).unwrap();

        let m = mesh.vertex_count() - 1;
        let mut dense = DMatrix::<f64>::zeros(m, m);
        for i in 0..mesh.vertex_count() {
            for d in 0..3 {
                let row = gradient_row(&mesh, i, d, rec.row_scale[i]);
                for &(a, wa) in &row {
                    for &(b, wb) in &row {
                        if a > 0 && b > 0 {
                            dense[(a - 1, b - 1)] += wa * wb;
                        }
                    }
                }
            }
        }
        let csc = CscMatrix::from(&dense);
        let cg = Reconstructor {
            solver: Solver::ConjugateGradient(csc),
            ..Reconstructor::new(&mesh, Energy::GradientMatch, 0).unwrap()
        };
        let iterative = cg.reconstruct(&features, frame[0]).unwrap();
        assert!(max_err(&direct, &iterative) < 1e-8, "{}", max_err(&direct, &iterative));
    }

    #[test]
    fn sequence_files_are_numbered() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = grid(3, 3, 1.0, 1.0).unwrap();
        let frames = vec![mesh.vertices().to_vec(); 3];
        let paths = write_sequence(dir.path(), &frames, mesh.faces()).unwrap();
        let names: Vec<_> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["frame_00000.obj", "frame_00001.obj", "frame_00002.obj"]);
        let back = crate::mesh::load_obj(&paths[2]).unwrap();
        assert_eq!(back.faces(), mesh.faces());
    }

    #[test]
    fn three_pi_fold_midpoint_is_half_turn() {
        let mesh = grid(5, 5, 1.0, 1.0).unwrap();
        let a = FeatureFrame::identity(25);
        let mut b = a.clone();
        for v in &mut b.vectors {
            v[2] = 3.0 * PI;
        }
        let rec = Reconstructor::new(&mesh, Energy::default(), 0).unwrap();
        let mid = interpolate(&a, &b, 1.0 / 3.0).unwrap();
        let p0 = mesh.vertices()[0];
        let out = rec.reconstruct(&mid, p0).unwrap();
        let half = rotation(&Vec3::z(), PI);
        for (q, p) in out.iter().zip(mesh.vertices()) {
            assert!((q - (p0 + half * (p - p0))).norm() < 1e-9);
        }
    }
}
