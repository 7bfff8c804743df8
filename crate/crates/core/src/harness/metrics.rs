//! Sequence error metrics: RMSE, symmetric Hausdorff distance and STED.

use crate::error::{Error, Result};
use crate::mesh::{Mesh, MeshSequence, Vec3};

fn same_shape(a: &MeshSequence, b: &MeshSequence) -> Result<()> {
    if a.vertex_count() != b.vertex_count() || a.frame_count() != b.frame_count() {
        return Err(Error::Shape(format!(
            "sequences differ in shape: {}x{} vs {}x{} (frames x vertices)",
            a.frame_count(),
            a.vertex_count(),
            b.frame_count(),
            b.vertex_count()
        )));
    }
    Ok(())
}

/// `sqrt(mean ‖a − b‖²)` over every vertex of every frame.
pub fn rmse(a: &MeshSequence, b: &MeshSequence) -> Result<f64> {
    same_shape(a, b)?;
    let count = a.frame_count() * a.vertex_count();
    if count == 0 {
        return Ok(0.0);
    }
    let sum: f64 = a
        .frames
        .iter()
        .zip(&b.frames)
        .flat_map(|(fa, fb)| fa.iter().zip(fb).map(|(p, q)| (p - q).norm_squared()))
        .sum();
    Ok((sum / count as f64).sqrt())
}

/// Closest point to `p` on triangle `abc`.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            lo: Vec3::repeat(f64::INFINITY),
            hi: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn distance_squared(&self, p: &Vec3) -> f64 {
        (0..3)
            .map(|k| {
                let d = (self.lo[k] - p[k]).max(p[k] - self.hi[k]).max(0.0);
                d * d
            })
            .sum()
    }
}

#[derive(Debug)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Split { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Split { bounds, .. } => bounds,
        }
    }
}

/// Bounding-volume hierarchy over the triangles of one mesh, for nearest-
/// surface queries.
#[derive(Debug)]
pub struct TriangleBvh {
    triangles: Vec<[Vec3; 3]>,
    nodes: Vec<Node>,
}

const LEAF_SIZE: usize = 4;

impl TriangleBvh {
    pub fn new(positions: &[Vec3], faces: &[[usize; 3]]) -> Self {
        let mut triangles: Vec<[Vec3; 3]> = faces
            .iter()
            .map(|f| [positions[f[0]], positions[f[1]], positions[f[2]]])
            .collect();
        let mut nodes = Vec::new();
        if !triangles.is_empty() {
            let n = triangles.len();
            build(&mut triangles, 0, n, &mut nodes);
        }
        TriangleBvh { triangles, nodes }
    }

    /// Distance from `p` to the nearest triangle (infinite when there are none).
    pub fn distance(&self, p: &Vec3) -> f64 {
        if self.nodes.is_empty() {
            return f64::INFINITY;
        }
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if node.bounds().distance_squared(p) >= best {
                continue;
            }
            match node {
                Node::Leaf { start, end, .. } => {
                    for [a, b, c] in &self.triangles[*start..*end] {
                        best = best.min((closest_point_on_triangle(p, a, b, c) - p).norm_squared());
                    }
                }
                Node::Split { left, right, .. } => {
                    let (dl, dr) = (
                        self.nodes[*left].bounds().distance_squared(p),
                        self.nodes[*right].bounds().distance_squared(p),
                    );
                    // Visit the nearer child first.
                    if dl < dr {
                        stack.extend([*right, *left]);
                    } else {
                        stack.extend([*left, *right]);
                    }
                }
            }
        }
        best.sqrt()
    }
}

fn build(tris: &mut [[Vec3; 3]], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let mut bounds = Aabb::empty();
    let mut centroids = Aabb::empty();
    for t in &tris[start..end] {
        t.iter().for_each(|p| bounds.grow(p));
        centroids.grow(&((t[0] + t[1] + t[2]) / 3.0));
    }
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { bounds, start, end });
        return id;
    }
    let extent = centroids.hi - centroids.lo;
    let axis = extent.imax();
    let mid = (start + end) / 2;
    tris[start..end].select_nth_unstable_by(mid - start, |a, b| {
        let ca = a[0][axis] + a[1][axis] + a[2][axis];
        let cb = b[0][axis] + b[1][axis] + b[2][axis];
        ca.total_cmp(&cb)
    });
    nodes.push(Node::Leaf { bounds, start, end });
    let left = build(tris, start, mid, nodes);
    let right = build(tris, mid, end, nodes);
    nodes[id] = Node::Split { bounds, left, right };
    id
}

/// Symmetric Hausdorff distance over vertex-to-nearest-triangle distances.
pub fn hausdorff(a: &Mesh, b: &Mesh) -> Result<f64> {
    hausdorff_positions(a.vertices(), a.faces(), b.vertices(), b.faces())
}

pub fn hausdorff_positions(pa: &[Vec3], fa: &[[usize; 3]], pb: &[Vec3], fb: &[[usize; 3]]) -> Result<f64> {
    if pa.is_empty() || pb.is_empty() || fa.is_empty() || fb.is_empty() {
        return Err(Error::Shape("Hausdorff distance of an empty mesh".into()));
    }
    let one_way = |p: &[Vec3], bvh: &TriangleBvh| p.iter().map(|v| bvh.distance(v)).fold(0.0, f64::max);
    let to_b = one_way(pa, &TriangleBvh::new(pb, fb));
    let to_a = one_way(pb, &TriangleBvh::new(pa, fa));
    Ok(to_b.max(to_a))
}

/// Mean over frames of the per-frame Hausdorff distance. The two sequences
/// may have different topologies but need the same frame count.
pub fn mean_hausdorff(a: &MeshSequence, b: &MeshSequence) -> Result<f64> {
    if a.frame_count() != b.frame_count() {
        return Err(Error::Shape(format!(
            "frame counts differ: {} vs {}",
            a.frame_count(),
            b.frame_count()
        )));
    }
    if a.frame_count() == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        sum += hausdorff_positions(fa, a.reference.faces(), fb, b.reference.faces())?;
    }
    Ok(sum / a.frame_count() as f64)
}

/// Weight of the temporal term in [`sted`].
pub const STED_TEMPORAL_WEIGHT: f64 = 1.0;

/// Spatial and temporal parts of the spatio-temporal edge difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StedTerms {
    /// RMS over frames and edges of `(|e_b| − |e_a|) / |e_a|`.
    pub spatial: f64,
    /// RMS over consecutive frame pairs and vertices of the velocity difference.
    pub temporal: f64,
}

impl StedTerms {
    pub fn combined(&self) -> f64 {
        (self.spatial * self.spatial + STED_TEMPORAL_WEIGHT * STED_TEMPORAL_WEIGHT * self.temporal * self.temporal).sqrt()
    }
}

/// STED of `b` against the reference sequence `a`; both share `a`'s topology.
pub fn sted_terms(a: &MeshSequence, b: &MeshSequence) -> Result<StedTerms> {
    same_shape(a, b)?;
    if a.reference.faces() != b.reference.faces() {
        return Err(Error::Shape("STED needs a shared topology".into()));
    }
    let edges = a.reference.edges();
    let mut spatial = 0.0;
    let mut spatial_n = 0usize;
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        for &(i, j) in &edges {
            let la = (fa[i] - fa[j]).norm();
            let lb = (fb[i] - fb[j]).norm();
            if la > 0.0 {
                let r = (lb - la) / la;
                spatial += r * r;
                spatial_n += 1;
            }
        }
    }
    let mut temporal = 0.0;
    let mut temporal_n = 0usize;
    for t in 1..a.frame_count() {
        for v in 0..a.vertex_count() {
            let va = a.frames[t][v] - a.frames[t - 1][v];
            let vb = b.frames[t][v] - b.frames[t - 1][v];
            temporal += (vb - va).norm_squared();
            temporal_n += 1;
        }
    }
    let rms = |s: f64, n: usize| if n == 0 { 0.0 } else { (s / n as f64).sqrt() };
    Ok(StedTerms {
        spatial: rms(spatial, spatial_n),
        temporal: rms(temporal, temporal_n),
    })
}

/// `sqrt(spatial² + w²·temporal²)` with `w` = [`STED_TEMPORAL_WEIGHT`].
pub fn sted(a: &MeshSequence, b: &MeshSequence) -> Result<f64> {
    Ok(sted_terms(a, b)?.combined())
}
