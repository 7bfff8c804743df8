//! Cloth–obstacle penetration removal against analytic signed-distance shapes.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};

/// Slack allowed on the `distance ≥ ε_c` guarantee.
pub const CONTACT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Capsule { p0: Vec3, p1: Vec3, radius: f64 },
    /// Closed cylinder centered at `center`, extending `height / 2` both ways
    /// along the unit `axis`.
    Cylinder { center: Vec3, axis: Vec3, radius: f64, height: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub shape: Shape,
    /// Collision margin `ε_c`.
    pub margin: f64,
}

/// A vertex closer than the margin, with its surface projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    pub vertex: usize,
    pub point: Vec3,
    pub normal: Vec3,
    pub distance: f64,
}

/// Some unit vector orthogonal to `d`, preferring `+x`.
fn perpendicular(d: &Vec3) -> Vec3 {
    let d = d.normalize();
    for e in [Vec3::x(), Vec3::y(), Vec3::z()] {
        let v = e - d * d.dot(&e);
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
    unreachable!("no axis is orthogonal-enough to a unit vector")
}

impl Obstacle {
    pub fn new(shape: Shape, margin: f64) -> Result<Self> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let radius = match &shape {
            Shape::Sphere { radius, .. } | Shape::Capsule { radius, .. } => *radius,
            Shape::Cylinder { axis, radius, height, .. } => {
                if !(axis.norm() > 0.0) {
                    return bad("cylinder axis must be nonzero");
                }
                if !(*height > 0.0) {
                    return bad("cylinder height must be positive");
                }
                *radius
            }
        };
        if !(radius > 0.0) {
            return bad("obstacle radius must be positive");
        }
        if !(margin >= 0.0) || !margin.is_finite() {
            return bad("collision margin must be a non-negative number");
        }
        let shape = match shape {
            Shape::Cylinder { center, axis, radius, height } => Shape::Cylinder {
                center,
                axis: axis.normalize(),
                radius,
                height,
            },
            s => s,
        };
        Ok(Obstacle { shape, margin })
    }

    /// Signed distance, closest surface point and outward normal at `p`.
    pub fn project(&self, p: &Vec3) -> (f64, Vec3, Vec3) {
        match &self.shape {
            Shape::Sphere { center, radius } => sphere_projection(p, center, *radius, &Vec3::x()),
            Shape::Capsule { p0, p1, radius } => {
                let d = p1 - p0;
                let len2 = d.norm_squared();
                let s = if len2 > 0.0 { ((p - p0).dot(&d) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let fallback = if len2 > 0.0 { perpendicular(&d) } else { Vec3::x() };
                sphere_projection(p, &(p0 + s * d), *radius, &fallback)
            }
            Shape::Cylinder { center, axis, radius, height } => {
                let rel = p - center;
                let z = rel.dot(axis);
                let radial = rel - z * axis;
                let rho = radial.norm();
                let dir = if rho > 0.0 { radial / rho } else { perpendicular(axis) };
                let half = 0.5 * height;
                let dz = z.abs() - half;
                let dr = rho - radius;
                let zsign: f64 = if z >= 0.0 { 1.0 } else { -1.0 };
                if dz <= 0.0 && dr <= 0.0 {
                    // Inside: exit through the nearer of wall and cap.
                    if dr >= dz {
                        (dr, center + z * axis + *radius * dir, dir)
                    } else {
                        (dz, center + zsign * half * axis + radial, zsign * axis)
                    }
                } else {
                    let cz = z.clamp(-half, half);
                    let cr = rho.min(*radius);
                    let q = center + cz * axis + cr * dir;
                    let dist = (p - q).norm();
                    let normal = if dr > 0.0 && dz > 0.0 {
                        (p - q) / dist
                    } else if dr > 0.0 {
                        dir
                    } else {
                        zsign * axis
                    };
                    (dist, q, normal)
                }
            }
        }
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.project(p).0
    }
}

fn sphere_projection(p: &Vec3, c: &Vec3, r: f64, fallback: &Vec3) -> (f64, Vec3, Vec3) {
    let d = p - c;
    let len = d.norm();
    let n = if len > 0.0 { d / len } else { *fallback };
    (len - r, c + r * n, n)
}

/// Every vertex with signed distance below the margin.
pub fn detect_collisions(positions: &[Vec3], obstacle: &Obstacle) -> Vec<Contact> {
    positions
        .iter()
        .enumerate()
        .filter_map(|(vertex, p)| {
            let (distance, point, normal) = obstacle.project(p);
            (distance < obstacle.margin).then_some(Contact {
                vertex,
                point,
                normal,
                distance,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Weight `λ` of the Laplacian-difference term.
    pub lambda: f64,
    pub max_iter: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            lambda: 1.0,
            max_iter: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub positions: Vec<Vec3>,
    pub iterations: usize,
    pub converged: bool,
    /// Smallest signed distance minus the margin after refinement (negative
    /// when something still penetrates).
    pub worst_clearance: f64,
}

/// Pushes penetrating vertices out to `closest + ε_c·n` while keeping the
/// rest close to `initial` in position and cotangent Laplacian.
///
/// Each iteration pins every vertex found colliding so far at its target and
/// solves `min Σ ‖p_i − p_init,i‖² + λ Σ ‖(L p)_i − (L p_init)_i‖²` for the
/// others, with `L` built from `initial`.
pub fn refine(topology: &Mesh, positions: &[Vec3], obstacle: &Obstacle, initial: &[Vec3], cfg: &RefineConfig) -> Result<RefineReport> {
    let n = topology.vertex_count();
    if positions.len() != n || initial.len() != n {
        return Err(Error::Shape(format!(
            "refine: mesh has {n} vertices, got {} positions and {} initial",
            positions.len(),
            initial.len()
        )));
    }
    let laplacian = laplacian_matrix(topology, initial)?;
    let lap_init = apply(&laplacian, initial);
    let clearance = |ps: &[Vec3]| {
        ps.iter()
            .map(|p| obstacle.signed_distance(p) - obstacle.margin)
            .fold(f64::INFINITY, f64::min)
    };

    let mut current = positions.to_vec();
    let mut pinned: BTreeMap<usize, Vec3> = BTreeMap::new();
    let mut iterations = 0;
    loop {
        let contacts: Vec<Contact> = detect_collisions(&current, obstacle)
            .into_iter()
            .filter(|c| c.distance < obstacle.margin - CONTACT_TOLERANCE)
            .collect();
        if contacts.is_empty() || iterations == cfg.max_iter {
            let worst_clearance = clearance(&current);
            return Ok(RefineReport {
                positions: current,
                iterations,
                converged: contacts.is_empty(),
                worst_clearance,
            });
        }
        for c in &contacts {
            pinned.insert(c.vertex, c.point + obstacle.margin * c.normal);
        }
        current = solve_pinned(&laplacian, &lap_init, initial, &pinned, cfg.lambda)?;
        iterations += 1;
    }
}

/// Sparse cotangent Laplacian of the mesh at `positions`; falls back to the
/// topology's stored weights when those positions have degenerate faces.
fn laplacian_matrix(topology: &Mesh, positions: &[Vec3]) -> Result<CscMatrix<f64>> {
    let n = topology.vertex_count();
    let mut weighted = topology.with_positions(positions.to_vec())?;
    if weighted.compute_weights().is_err() {
        if !topology.has_weights() {
            return Err(Error::Structure("no usable cotangent weights for refinement".into()));
        }
        weighted = topology.clone();
    }
    let mut coo = CooMatrix::new(n, n);
    for i in 0..n {
        let mut diag = 0.0;
        for (&j, &c) in weighted.neighbors(i).iter().zip(weighted.neighbor_weights(i)) {
            coo.push(i, j, -c);
            diag += c;
        }
        coo.push(i, i, diag);
    }
    Ok(CscMatrix::from(&coo))
}

fn apply(a: &CscMatrix<f64>, x: &[Vec3]) -> Vec<Vec3> {
    let mut y = vec![Vec3::zeros(); a.nrows()];
    for j in 0..a.ncols() {
        let col = a.col(j);
        for (&i, &v) in col.row_indices().iter().zip(col.values()) {
            y[i] += v * x[j];
        }
    }
    y
}

fn solve_pinned(
    laplacian: &CscMatrix<f64>,
    lap_init: &[Vec3],
    initial: &[Vec3],
    pinned: &BTreeMap<usize, Vec3>,
    lambda: f64,
) -> Result<Vec<Vec3>> {
    let n = initial.len();
    let mut free_index = vec![None; n];
    let mut free = 0;
    for (v, slot) in free_index.iter_mut().enumerate() {
        if !pinned.contains_key(&v) {
            *slot = Some(free);
            free += 1;
        }
    }
    let mut out: Vec<Vec3> = (0..n).map(|v| pinned.get(&v).copied().unwrap_or(initial[v])).collect();
    if free == 0 {
        return Ok(out);
    }

    // Normal equations of the stacked system [I_free; √λ L] p = [p_init; √λ L p_init].
    let mut coo = CooMatrix::new(free, free);
    let mut rhs = DMatrix::<f64>::zeros(free, 3);
    for v in 0..n {
        if let Some(f) = free_index[v] {
            coo.push(f, f, 1.0);
            for k in 0..3 {
                rhs[(f, k)] += initial[v][k];
            }
        }
    }
    let lt = laplacian.transpose();
    for row in 0..n {
        // Row `row` of L is column `row` of Lᵀ.
        let col = lt.col(row);
        let entries: Vec<(usize, f64)> = col.row_indices().iter().copied().zip(col.values().iter().copied()).collect();
        let mut target = lap_init[row];
        for &(v, w) in &entries {
            if let Some(p) = pinned.get(&v) {
                target -= w * p;
            }
        }
        for &(a, wa) in &entries {
            let Some(fa) = free_index[a] else { continue };
            for k in 0..3 {
                rhs[(fa, k)] += lambda * wa * target[k];
            }
            for &(b, wb) in &entries {
                if let Some(fb) = free_index[b] {
                    coo.push(fa, fb, lambda * wa * wb);
                }
            }
        }
    }
    let factor = CscCholesky::factor(&CscMatrix::from(&coo))
        .map_err(|_| Error::NonFinite("refinement system"))?;
    let sol = factor.solve(&rhs);
    for v in 0..n {
        if let Some(f) = free_index[v] {
            out[v] = Vec3::new(sol[(f, 0)], sol[(f, 1)], sol[(f, 2)]);
        }
    }
    if out.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Error::NonFinite("refined positions"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::grid;

    fn sphere(r: f64, margin: f64) -> Obstacle {
        Obstacle::new(Shape::Sphere { center: Vec3::zeros(), radius: r }, margin).unwrap()
    }

    #[test]
    fn far_vertices_do_not_collide() {
        let o = sphere(1.0, 0.01);
        assert!(detect_collisions(&[Vec3::new(3.0, 0.0, 0.0), Vec3::new(0.0, -1.02, 0.0)], &o).is_empty());
    }

    #[test]
    fn sphere_center_projects_along_plus_x() {
        let o = sphere(2.0, 0.0);
        let c = detect_collisions(&[Vec3::zeros()], &o);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].point, Vec3::new(2.0, 0.0, 0.0));
        assert_eq!(c[0].normal, Vec3::x());
        assert_eq!(c[0].distance, -2.0);
    }

    #[test]
    fn half_depth_on_z_axis() {
        let r = 1.5;
        let o = sphere(r, 1e-3);
        let c = detect_collisions(&[Vec3::new(0.0, 0.0, r / 2.0)], &o);
        assert_eq!(c[0].point, Vec3::new(0.0, 0.0, r));
        assert_eq!(c[0].normal, Vec3::z());
    }

    #[test]
    fn capsule_and_cylinder_projections() {
        let cap = Obstacle::new(
            Shape::Capsule { p0: Vec3::new(0.0, 0.0, -1.0), p1: Vec3::new(0.0, 0.0, 1.0), radius: 0.5 },
            0.0,
        )
        .unwrap();
        let (d, q, n) = cap.project(&Vec3::new(0.2, 0.0, 0.3));
        assert!((d + 0.3).abs() < 1e-15);
        assert!((q - Vec3::new(0.5, 0.0, 0.3)).norm() < 1e-15);
        assert!((n - Vec3::x()).norm() < 1e-15);
        let (d, q, _) = cap.project(&Vec3::new(0.0, 0.0, 2.0));
        assert!((d - 0.5).abs() < 1e-15 && (q - Vec3::new(0.0, 0.0, 1.5)).norm() < 1e-15);

        let cyl = Obstacle::new(
            Shape::Cylinder { center: Vec3::zeros(), axis: Vec3::new(0.0, 0.0, 2.0), radius: 1.0, height: 2.0 },
            0.0,
        )
        .unwrap();
        // Nearer to the top cap than to the wall.
        let (d, q, n) = cyl.project(&Vec3::new(0.1, 0.0, 0.8));
        assert!((d + 0.2).abs() < 1e-15);
        assert!((q - Vec3::new(0.1, 0.0, 1.0)).norm() < 1e-15);
        assert_eq!(n, Vec3::z());
        // Outside, beyond the rim.
        let (d, _, n) = cyl.project(&Vec3::new(2.0, 0.0, 2.0));
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        assert!((n - Vec3::new(1.0, 0.0, 1.0).normalize()).norm() < 1e-15);
    }

    #[test]
    fn invalid_obstacles_are_rejected() {
        assert!(Obstacle::new(Shape::Sphere { center: Vec3::zeros(), radius: 0.0 }, 0.1).is_err());
        assert!(Obstacle::new(Shape::Sphere { center: Vec3::zeros(), radius: 1.0 }, -0.1).is_err());
    }

    #[test]
    fn collision_free_input_is_unchanged() {
        let mesh = grid(5, 5, 1.0, 1.0).unwrap();
        let o = Obstacle::new(Shape::Sphere { center: Vec3::new(0.5, 0.5, -2.0), radius: 1.0 }, 1e-3).unwrap();
        let cfg = RefineConfig { lambda: 1e8, max_iter: 10 };
        let rep = refine(&mesh, mesh.vertices(), &o, mesh.vertices(), &cfg).unwrap();
        assert_eq!(rep.iterations, 0);
        assert!(rep.converged);
        assert_eq!(rep.positions, mesh.vertices());
    }

    #[test]
    fn sphere_cap_is_resolved_locally() {
        let mesh = grid(33, 33, 1.0, 1.0).unwrap();
        let diag = Mesh::bbox_diagonal(mesh.vertices());
        let eps = 1e-3 * diag;
        let center = Vec3::new(0.5, 0.5, -0.25);
        let o = Obstacle::new(Shape::Sphere { center, radius: 0.3 }, eps).unwrap();
        let initial = mesh.vertices().to_vec();
        let before = detect_collisions(&initial, &o);
        assert!(!before.is_empty());
        let rep = refine(&mesh, &initial, &o, &initial, &RefineConfig::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations <= 3, "{} iterations", rep.iterations);
        assert!(rep.worst_clearance >= -CONTACT_TOLERANCE, "{}", rep.worst_clearance);
        let far = (0..mesh.vertex_count())
            .filter(|&v| (initial[v] - Vec3::new(0.5, 0.5, 0.0)).norm() > 0.4)
            .map(|v| (rep.positions[v] - initial[v]).norm())
            .fold(0.0, f64::max);
        eprintln!("iterations {}, far-field motion {far:e}", rep.iterations);
        assert!(far < 1e-3 * diag, "far-field motion {far}");
    }
}
