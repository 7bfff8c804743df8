//! Per-vertex deformation gradients relative to a reference mesh and their
//! polar factorization `T = R·S`.

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};

pub type Mat3 = Matrix3<f64>;

/// `A` counts as rank deficient when its smallest eigenvalue falls below this
/// fraction of the largest (flat one-rings).
const PLANAR_RATIO: f64 = 1e-10;
/// Below this ratio the regularized system is still treated as singular.
const SINGULAR_RATIO: f64 = 1e-14;

/// Deformation gradients of one frame together with their polar factors.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformField {
    pub gradients: Vec<Mat3>,
    pub rotations: Vec<Mat3>,
    pub stretches: Vec<Mat3>,
}

impl DeformField {
    /// Fits and factors the gradient at every vertex of `frame`.
    pub fn compute(reference: &Mesh, frame: &[Vec3]) -> Result<Self> {
        if frame.len() != reference.vertex_count() {
            return Err(Error::Shape(format!(
                "frame has {} vertices, reference has {}",
                frame.len(),
                reference.vertex_count()
            )));
        }
        let n = frame.len();
        let mut field = DeformField {
            gradients: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            stretches: Vec::with_capacity(n),
        };
        for i in 0..n {
            let t = fit_gradient(reference, frame, i)?;
            let (r, s) = polar_decompose(&t)?;
            field.gradients.push(t);
            field.rotations.push(r);
            field.stretches.push(s);
        }
        Ok(field)
    }

    pub fn len(&self) -> usize {
        self.gradients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gradients.is_empty()
    }
}

/// Weighted one-ring moment matrix `A_i = Σ_j c_ij e_ij e_ijᵀ` with
/// `e_ij = p_i − p_j` taken on `positions`.
pub fn edge_moment(mesh: &Mesh, positions: &[Vec3], i: usize) -> Mat3 {
    let mut a = Mat3::zeros();
    for (&j, &c) in mesh.neighbors(i).iter().zip(mesh.neighbor_weights(i)) {
        let e = positions[i] - positions[j];
        a += c * e * e.transpose();
    }
    a
}

/// Least-squares deformation gradient of vertex `i`:
/// `argmin_T Σ_j c_ij ‖(p_i − p_j) − T (p0_i − p0_j)‖²`.
///
/// When the reference one-ring is flat, `A` is singular in the normal
/// direction. The fit then gains one extra pair mapping the reference vertex
/// normal onto the deformed one, weighted by the mean one-ring weight
/// magnitude.
pub fn fit_gradient(reference: &Mesh, frame: &[Vec3], i: usize) -> Result<Mat3> {
    if !reference.has_weights() {
        return Err(Error::Structure("cotangent weights have not been computed".into()));
    }
    let rest = reference.vertices();
    let ring = reference.neighbors(i);
    let weights = reference.neighbor_weights(i);
    let mut a = Mat3::zeros();
    let mut b = Mat3::zeros();
    for (&j, &c) in ring.iter().zip(weights) {
        let e0 = rest[i] - rest[j];
        let et = frame[i] - frame[j];
        a += c * e0 * e0.transpose();
        b += c * et * e0.transpose();
    }
    if !(a.iter().all(|x| x.is_finite()) && b.iter().all(|x| x.is_finite())) {
        return Err(Error::NonFinite("deformation gradient fit"));
    }

    let (lo, hi) = eigen_range(&a);
    if hi <= 0.0 || lo.abs() <= PLANAR_RATIO * hi {
        let mean_w = weights.iter().map(|c| c.abs()).sum::<f64>() / weights.len() as f64;
        let w = if mean_w > 0.0 { mean_w } else { 1.0 };
        let n0 = reference.vertex_normal(rest, i);
        let nt = reference.vertex_normal(frame, i);
        a += w * n0 * n0.transpose();
        b += w * nt * n0.transpose();
        let (lo, hi) = eigen_range(&a);
        if hi <= 0.0 || lo.abs() <= SINGULAR_RATIO * hi {
            return Err(Error::DegenerateNeighborhood { vertex: i });
        }
    }
    let a_inv = a
        .try_inverse()
        .ok_or(Error::DegenerateNeighborhood { vertex: i })?;
    Ok(b * a_inv)
}

fn eigen_range(a: &Mat3) -> (f64, f64) {
    let eig = SymmetricEigen::new(*a);
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|x| x.abs()).collect();
    let lo = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = abs.iter().cloned().fold(0.0, f64::max);
    (lo, hi)
}

/// Polar decomposition `T = R·S` with `R` a proper rotation.
///
/// With `T = U Σ Vᵀ`, `R = U diag(1, 1, det(U Vᵀ)) Vᵀ` and `S = Rᵀ T`
/// (symmetrized). A reflection in `T` ends up in `S`.
pub fn polar_decompose(t: &Mat3) -> Result<(Mat3, Mat3)> {
    if !t.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("polar decomposition input"));
    }
    let svd = t.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let d = (u * v_t).determinant().signum();
    let flip = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let r = u * flip * v_t;
    // The 3×3 SVD is only accurate to ~1e-9; polish with Newton's polar
    // iteration on T·H, H = V diag(1,1,d) Vᵀ, whose orthogonal factor is R.
    let r = newton_polar(&(t * v_t.transpose() * flip * v_t)).unwrap_or(r);
    let s = r.transpose() * t;
    let s = 0.5 * (s + s.transpose());
    Ok((r, s))
}

/// Scaled Newton iteration `X ← ½(γX + γ⁻¹X⁻ᵀ)` for the orthogonal polar
/// factor of a non-singular matrix with positive determinant.
fn newton_polar(m: &Mat3) -> Option<Mat3> {
    if !(m.determinant() > 0.0) {
        return None;
    }
    let mut x = *m;
    for _ in 0..50 {
        let inv = x.try_inverse()?;
        let gamma = (inv.norm() / x.norm()).sqrt();
        let next = 0.5 * (gamma * x + inv.transpose() / gamma);
        let delta = (next - x).norm();
        x = next;
        if delta <= 1e-15 * x.norm() {
            break;
        }
    }
    // One unscaled step removes the residual scaling error.
    let inv = x.try_inverse()?;
    let x = 0.5 * (x + inv.transpose());
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Rotation about a unit axis by `angle` (Rodrigues' formula).
pub fn rotation(axis: &Vec3, angle: f64) -> Mat3 {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::grid;
    use proptest::prelude::*;

    fn rx(a: f64) -> Mat3 {
        rotation(&Vec3::x(), a)
    }

    fn rz(a: f64) -> Mat3 {
        rotation(&Vec3::z(), a)
    }

    /// A closed octahedron: every one-ring is non-planar.
    fn octahedron() -> Mesh {
        let v = vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(0.0, 0.0, -1.0),
        ];
        let f = vec![
            [0, 2, 4],
            [2, 1, 4],
            [1, 3, 4],
            [3, 0, 4],
            [2, 0, 5],
            [1, 2, 5],
            [3, 1, 5],
            [0, 3, 5],
        ];
        // Perturb to avoid the zero cotangent weights of the regular shape.
        let v = v
            .into_iter()
            .enumerate()
            .map(|(i, p)| p + 0.07 * Vec3::new((i as f64).sin(), (2.0 * i as f64).cos(), 0.3 * i as f64 / 5.0))
            .collect();
        Mesh::with_weights(v, f).unwrap()
    }

    fn rel_frob(a: &Mat3, b: &Mat3) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn identity_frame_gives_identity() {
        let m = grid(4, 4, 1.0, 1.0).unwrap();
        for i in 0..m.vertex_count() {
            let t = fit_gradient(&m, m.vertices(), i).unwrap();
            assert!((t - Mat3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn global_rotation_is_recovered_on_flat_grid() {
        let m = grid(5, 4, 1.0, 0.7).unwrap();
        let rot = rz(std::f64::consts::FRAC_PI_4) * rx(0.4);
        let frame: Vec<Vec3> = m.vertices().iter().map(|p| rot * p).collect();
        let field = DeformField::compute(&m, &frame).unwrap();
        for i in 0..m.vertex_count() {
            assert!(rel_frob(&field.gradients[i], &rot) < 1e-10);
            assert!((field.stretches[i] - Mat3::identity()).norm() < 1e-8);
            assert!((field.rotations[i] - rot).norm() < 1e-9);
        }
    }

    #[test]
    fn known_affine_map_on_non_planar_ring() {
        let m = octahedron();
        let target = rx(0.3) * Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 0.5));
        let offset = Vec3::new(0.2, -1.0, 3.0);
        let frame: Vec<Vec3> = m.vertices().iter().map(|p| target * p + offset).collect();
        for i in 0..m.vertex_count() {
            let t = fit_gradient(&m, &frame, i).unwrap();
            assert!((t - target).norm() < 1e-10, "vertex {i}: {t}");
        }
    }

    /// Dense oracle: solve the 9-unknown normal system for vec(T) directly.
    fn dense_fit(m: &Mesh, frame: &[Vec3], i: usize) -> Mat3 {
        let mut normal = nalgebra::SMatrix::<f64, 9, 9>::zeros();
        let mut rhs = nalgebra::SVector::<f64, 9>::zeros();
        for (&j, &c) in m.neighbors(i).iter().zip(m.neighbor_weights(i)) {
            let e0 = m.vertices()[i] - m.vertices()[j];
            let et = frame[i] - frame[j];
            // Row r of T·e0 is Σ_k T[r,k] e0[k]; unknown index 3r + k.
            for r in 0..3 {
                let mut row = nalgebra::SVector::<f64, 9>::zeros();
                for k in 0..3 {
                    row[3 * r + k] = e0[k];
                }
                normal += c * row * row.transpose();
                rhs += c * et[r] * row;
            }
        }
        let x = normal.lu().solve(&rhs).unwrap();
        Mat3::from_row_slice(x.as_slice())
    }

    proptest! {
        #[test]
        fn fit_matches_dense_oracle(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = octahedron();
            let frame: Vec<Vec3> = m
                .vertices()
                .iter()
                .map(|p| p + 0.3 * Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            for i in 0..m.vertex_count() {
                let t = fit_gradient(&m, &frame, i).unwrap();
                let oracle = dense_fit(&m, &frame, i);
                prop_assert!((t - oracle).norm() <= 1e-10 * oracle.norm().max(1.0));
            }
        }

        #[test]
        fn polar_recovers_rotation_and_spd_factor(
            axis in proptest::array::uniform3(-1.0f64..1.0),
            angle in -3.1f64..3.1,
            diag in proptest::array::uniform3(0.3f64..3.0),
            q in proptest::array::uniform3(-1.0f64..1.0),
        ) {
            let axis = Vec3::from(axis);
            prop_assume!(axis.norm() > 1e-3);
            let r = rotation(&axis, angle);
            let basis = rotation(&Vec3::from(q).normalize(), 0.9);
            let s = basis * Mat3::from_diagonal(&Vec3::from(diag)) * basis.transpose();
            let (r2, s2) = polar_decompose(&(r * s)).unwrap();
            prop_assert!((r2 - r).norm() < 1e-9);
            prop_assert!((s2 - s).norm() < 1e-9);
        }
    }

    #[test]
    fn polar_of_identity_and_diagonal() {
        let (r, s) = polar_decompose(&Mat3::identity()).unwrap();
        assert!((r - Mat3::identity()).norm() < 1e-15);
        assert!((s - Mat3::identity()).norm() < 1e-15);
        let d = Mat3::from_diagonal(&Vec3::new(2.0, 3.0, 4.0));
        let (r, s) = polar_decompose(&d).unwrap();
        assert!((r - Mat3::identity()).norm() < 1e-14);
        assert!((s - d).norm() < 1e-13);
    }

    #[test]
    fn polar_of_rotated_stretch() {
        let rot = rz(1.0);
        let s = Mat3::from_diagonal(&Vec3::new(1.5, 0.8, 1.2));
        let (r2, s2) = polar_decompose(&(rot * s)).unwrap();
        assert!((r2 - rot).norm() < 1e-10);
        assert!((s2 - s).norm() < 1e-10);
    }

    #[test]
    fn reflection_is_absorbed_by_stretch() {
        let t = rz(0.7) * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -2.0));
        let (r, s) = polar_decompose(&t).unwrap();
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!((r * r.transpose() - Mat3::identity()).norm() < 1e-12);
        assert!((s - s.transpose()).norm() < 1e-12);
        assert!(rel_frob(&(r * s), &t) < 1e-12);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut t = Mat3::identity();
        t[(1, 2)] = f64::NAN;
        assert!(matches!(polar_decompose(&t), Err(Error::NonFinite(_))));
    }
}
