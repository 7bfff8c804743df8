//! Subdivided-coarse baseline: midpoint subdivision of the coarse sequence,
//! resampled onto the fine topology by matching rest positions.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::harness::metrics::closest_point_on_triangle;
use crate::mesh::{Mesh, MeshSequence, Vec3};

/// Parent vertices of every vertex produced by repeated midpoint subdivision.
#[derive(Debug, Clone)]
pub struct Subdivision {
    /// `(a, b)` for a vertex at the midpoint of `a` and `b`; `(v, v)` for an original vertex.
    parents: Vec<(usize, usize)>,
    pub faces: Vec<[usize; 3]>,
}

impl Subdivision {
    /// `levels` rounds of 1-to-4 midpoint subdivision of `faces` on `vertex_count` vertices.
    pub fn new(vertex_count: usize, faces: &[[usize; 3]], levels: usize) -> Self {
        let mut parents: Vec<(usize, usize)> = (0..vertex_count).map(|v| (v, v)).collect();
        let mut faces = faces.to_vec();
        // New vertices are appended, so ids stay valid across levels.
        for _ in 0..levels {
            let mut level = parents;
            let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
            let mut mid = |a: usize, b: usize, level: &mut Vec<(usize, usize)>| {
                *midpoint.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    level.push((a.min(b), a.max(b)));
                    level.len() - 1
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for &[a, b, c] in &faces {
                let ab = mid(a, b, &mut level);
                let bc = mid(b, c, &mut level);
                let ca = mid(c, a, &mut level);
                next.extend([[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
            }
            faces = next;
            parents = level;
        }
        Subdivision { parents, faces }
    }

    pub fn vertex_count(&self) -> usize {
        self.parents.len()
    }

    pub fn apply(&self, positions: &[Vec3]) -> Vec<Vec3> {
        // Parents always precede children, so one forward pass suffices.
        let mut out: Vec<Vec3> = Vec::with_capacity(self.parents.len());
        for (v, &(a, b)) in self.parents.iter().enumerate() {
            if a == v && b == v {
                out.push(positions[v]);
            } else {
                let p = 0.5 * (out[a] + out[b]);
                out.push(p);
            }
        }
        out
    }
}

/// Barycentric transfer of positions from one surface to another by closest
/// points in rest space.
#[derive(Debug, Clone)]
pub struct Resampler {
    weights: Vec<[(usize, f64); 3]>,
}

fn barycentric(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> [f64; 3] {
    let v0 = b - a;
    let v1 = c - a;
    let v2 = p - a;
    let d00 = v0.dot(&v0);
    let d01 = v0.dot(&v1);
    let d11 = v1.dot(&v1);
    let d20 = v2.dot(&v0);
    let d21 = v2.dot(&v1);
    let denom = d00 * d11 - d01 * d01;
    let v = (d11 * d20 - d01 * d21) / denom;
    let w = (d00 * d21 - d01 * d20) / denom;
    [1.0 - v - w, v, w]
}

impl Resampler {
    pub fn new(source_rest: &[Vec3], source_faces: &[[usize; 3]], target_rest: &[Vec3]) -> Result<Self> {
        if source_faces.is_empty() {
            return Err(Error::Shape("cannot resample from a mesh without faces".into()));
        }
        let weights = target_rest
            .iter()
            .map(|p| {
                let (face, q) = source_faces
                    .iter()
                    .map(|f| {
                        let q = closest_point_on_triangle(p, &source_rest[f[0]], &source_rest[f[1]], &source_rest[f[2]]);
                        (f, q)
                    })
                    .min_by(|x, y| (x.1 - p).norm_squared().total_cmp(&(y.1 - p).norm_squared()))
                    .expect("nonempty faces");
                let w = barycentric(&q, &source_rest[face[0]], &source_rest[face[1]], &source_rest[face[2]]);
                [(face[0], w[0]), (face[1], w[1]), (face[2], w[2])]
            })
            .collect();
        Ok(Resampler { weights })
    }

    pub fn apply(&self, positions: &[Vec3]) -> Vec<Vec3> {
        self.weights
            .iter()
            .map(|w| w.iter().map(|&(v, c)| c * positions[v]).sum())
            .collect()
    }
}

/// Midpoint-subdivides `coarse` `levels` times and resamples every frame onto
/// the topology of `fine_reference`.
pub fn subdivided_baseline(coarse: &MeshSequence, fine_reference: &Mesh, levels: usize) -> Result<MeshSequence> {
    let sub = Subdivision::new(coarse.vertex_count(), coarse.reference.faces(), levels);
    let rest = sub.apply(coarse.reference.vertices());
    let resampler = Resampler::new(&rest, &sub.faces, fine_reference.vertices())?;
    let frames = coarse.frames.iter().map(|f| resampler.apply(&sub.apply(f))).collect();
    MeshSequence::new(fine_reference.clone(), frames)
}

/// Subdivision levels taking an `n`-per-side grid to at least `m` per side.
pub fn levels_for(coarse_side: usize, fine_side: usize) -> usize {
    let mut side = coarse_side;
    let mut levels = 0;
    while side < fine_side {
        side = 2 * side - 1;
        levels += 1;
    }
    levels
}
