//! Shared-topology triangle meshes with one-ring adjacency and cotangent
//! edge weights.

mod obj;

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub use obj::{format_sig9, load_obj, load_sequence, parse_obj, save_obj, write_obj};

pub type Vec3 = Vector3<f64>;

/// Cotangent weights are clamped to this magnitude so that slivers cannot
/// dominate the least-squares systems built on top of them.
pub const WEIGHT_CLAMP: f64 = 1e4;

/// A triangle mesh whose topology is fixed after construction.
///
/// `adjacency[i]` is the one-ring of vertex `i` sorted by index, and
/// `weights[i][k]` is the cotangent weight of edge `(i, adjacency[i][k])`
/// once [`Mesh::compute_weights`] has run.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    adjacency: Vec<Vec<usize>>,
    incident_faces: Vec<Vec<usize>>,
    weights: Vec<Vec<f64>>,
}

impl Mesh {
    /// Builds a mesh and its adjacency.
    ///
    /// Rejects out-of-range indices, faces with repeated vertices, edges
    /// shared by more than two faces and vertices with fewer than two
    /// neighbors.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("mesh vertices"));
        }
        let mut edge_faces: HashMap<(usize, usize), u32> = HashMap::new();
        let mut adjacency = vec![Vec::new(); n];
        let mut incident_faces = vec![Vec::new(); n];
        for (f, tri) in faces.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&v| v >= n) {
                return Err(Error::Structure(format!(
                    "face {f} references vertex {bad} but the mesh has {n} vertices"
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::Structure(format!("face {f} repeats a vertex")));
            }
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let count = edge_faces.entry(key).or_insert(0);
                *count += 1;
                if *count > 2 {
                    return Err(Error::Structure(format!(
                        "edge ({}, {}) is shared by more than two faces",
                        key.0, key.1
                    )));
                }
                adjacency[a].push(b);
                adjacency[b].push(a);
                incident_faces[a].push(f);
            }
        }
        for (i, ring) in adjacency.iter_mut().enumerate() {
            ring.sort_unstable();
            ring.dedup();
            if ring.len() < 2 {
                return Err(Error::Structure(format!(
                    "vertex {i} has {} neighbors; at least 2 are required",
                    ring.len()
                )));
            }
        }
        Ok(Mesh {
            vertices,
            faces,
            adjacency,
            incident_faces,
            weights: Vec::new(),
        })
    }

    /// Convenience for `new` followed by `compute_weights`.
    pub fn with_weights(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mut mesh = Mesh::new(vertices, faces)?;
        mesh.compute_weights()?;
        Ok(mesh)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn incident_faces(&self, i: usize) -> &[usize] {
        &self.incident_faces[i]
    }

    pub fn has_weights(&self) -> bool {
        !self.weights.is_empty()
    }

    /// Cotangent weights of the one-ring of `i`, parallel to `neighbors(i)`.
    pub fn neighbor_weights(&self, i: usize) -> &[f64] {
        &self.weights[i]
    }

    /// Cotangent weight `c_ij`, or `None` when `(i, j)` is not an edge or the
    /// weights have not been computed.
    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        let k = self.adjacency.get(i)?.binary_search(&j).ok()?;
        self.weights.get(i).map(|w| w[k])
    }

    /// Unique undirected edges `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, ring)| ring.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    /// Returns a copy of this mesh with the vertex positions replaced.
    pub fn with_positions(&self, positions: Vec<Vec3>) -> Result<Self> {
        if positions.len() != self.vertices.len() {
            return Err(Error::Shape(format!(
                "expected {} positions, got {}",
                self.vertices.len(),
                positions.len()
            )));
        }
        Ok(Mesh {
            vertices: positions,
            ..self.clone()
        })
    }

    /// Fills `c_ij = cot α_ij + cot β_ij` for every edge.
    ///
    /// Boundary edges only have one opposite angle and use that alone.
    pub fn compute_weights(&mut self) -> Result<()> {
        let mut acc: HashMap<(usize, usize), f64> = HashMap::new();
        for (f, tri) in self.faces.iter().enumerate() {
            let p = [
                self.vertices[tri[0]],
                self.vertices[tri[1]],
                self.vertices[tri[2]],
            ];
            let area2 = (p[1] - p[0]).cross(&(p[2] - p[0])).norm();
            let longest = (0..3)
                .map(|k| (p[(k + 1) % 3] - p[k]).norm_squared())
                .fold(0.0, f64::max);
            if !(area2 > f64::EPSILON * longest) {
                return Err(Error::DegenerateFace { face: f });
            }
            for k in 0..3 {
                // Angle at corner k is opposite the edge (k+1, k+2).
                let u = p[(k + 1) % 3] - p[k];
                let v = p[(k + 2) % 3] - p[k];
                let cot = u.dot(&v) / u.cross(&v).norm();
                let (a, b) = (tri[(k + 1) % 3], tri[(k + 2) % 3]);
                *acc.entry((a.min(b), a.max(b))).or_insert(0.0) += cot;
            }
        }
        self.weights = self
            .adjacency
            .iter()
            .enumerate()
            .map(|(i, ring)| {
                ring.iter()
                    .map(|&j| acc[&(i.min(j), i.max(j))].clamp(-WEIGHT_CLAMP, WEIGHT_CLAMP))
                    .collect()
            })
            .collect();
        Ok(())
    }

    /// Area-weighted vertex normal of `i` evaluated at `positions`.
    pub fn vertex_normal(&self, positions: &[Vec3], i: usize) -> Vec3 {
        let mut n = Vec3::zeros();
        for &f in &self.incident_faces[i] {
            let [a, b, c] = self.faces[f];
            n += (positions[b] - positions[a]).cross(&(positions[c] - positions[a]));
        }
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            n
        }
    }

    /// Diagonal length of the axis-aligned bounding box of `positions`.
    pub fn bbox_diagonal(positions: &[Vec3]) -> f64 {
        let Some(first) = positions.first() else {
            return 0.0;
        };
        let (lo, hi) = positions.iter().fold((*first, *first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        });
        (hi - lo).norm()
    }

    /// Applies the cotangent Laplacian `(L p)_i = Σ_j c_ij (p_i − p_j)`.
    pub fn laplacian(&self, positions: &[Vec3]) -> Vec<Vec3> {
        (0..self.vertex_count())
            .map(|i| {
                self.adjacency[i]
                    .iter()
                    .zip(&self.weights[i])
                    .map(|(&j, &c)| c * (positions[i] - positions[j]))
                    .sum()
            })
            .collect()
    }
}

/// A sequence of deformed frames sharing the topology of a reference mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshSequence {
    pub reference: Mesh,
    pub frames: Vec<Vec<Vec3>>,
}

impl MeshSequence {
    pub fn new(reference: Mesh, frames: Vec<Vec<Vec3>>) -> Result<Self> {
        let v = reference.vertex_count();
        if let Some((t, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != v) {
            return Err(Error::Shape(format!(
                "frame {t} has {} vertices, reference has {v}",
                f.len()
            )));
        }
        Ok(MeshSequence { reference, frames })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.reference.vertex_count()
    }

    pub fn frame_mesh(&self, t: usize) -> Result<Mesh> {
        self.reference.with_positions(self.frames[t].clone())
    }
}

/// Regular `nx × ny` grid on `[0, sx] × [0, sy]` in the z = 0 plane.
///
/// Vertex `(ix, iy)` has index `iy * nx + ix`; every cell is split along the
/// diagonal from `(ix, iy)` to `(ix + 1, iy + 1)`.
pub fn grid(nx: usize, ny: usize, sx: f64, sy: f64) -> Result<Mesh> {
    if nx < 2 || ny < 2 {
        return Err(Error::Structure(format!("grid {nx}x{ny} is too small")));
    }
    let vertices = (0..ny)
        .flat_map(|iy| {
            (0..nx).map(move |ix| {
                Vec3::new(
                    sx * ix as f64 / (nx - 1) as f64,
                    sy * iy as f64 / (ny - 1) as f64,
                    0.0,
                )
            })
        })
        .collect();
    let mut faces = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for iy in 0..ny - 1 {
        for ix in 0..nx - 1 {
            let a = iy * nx + ix;
            let b = a + 1;
            let c = a + nx + 1;
            let d = a + nx;
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    Mesh::with_weights(vertices, faces)
}
