//! Integer consistency solvers for axis orientations and 2π cycle counts.
//!
//! Both problems live on a graph whose nodes are (frame, vertex) pairs.
//! Spatial edges connect mesh neighbors within a frame; temporal edges connect
//! a vertex to itself in the previous frame. The solvers propagate along a
//! breadth-first spanning tree and then apply single-node moves until no move
//! improves the objective.

use std::collections::VecDeque;
use std::f64::consts::TAU;

use super::{AxisAngle, ResolveConfig};
use crate::mesh::Mesh;

/// The (frame, vertex) consistency graph.
#[derive(Debug, Clone)]
pub struct ResolutionGraph {
    vertex_count: usize,
    frame_count: usize,
    temporal: bool,
    spatial_edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl ResolutionGraph {
    pub fn from_mesh(mesh: &Mesh, frame_count: usize, temporal: bool) -> Self {
        Self::new(mesh.vertex_count(), &mesh.edges(), frame_count, temporal)
    }

    /// Builds the graph from an undirected spatial edge list.
    pub fn new(vertex_count: usize, edges: &[(usize, usize)], frame_count: usize, temporal: bool) -> Self {
        let mut spatial_edges: Vec<(usize, usize)> =
            edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        spatial_edges.sort_unstable();
        spatial_edges.dedup();
        let n = vertex_count * frame_count;
        let mut neighbors = vec![Vec::new(); n];
        for t in 0..frame_count {
            let base = t * vertex_count;
            for &(a, b) in &spatial_edges {
                neighbors[base + a].push(base + b);
                neighbors[base + b].push(base + a);
            }
            if temporal && t > 0 {
                for i in 0..vertex_count {
                    neighbors[base + i].push(base - vertex_count + i);
                    neighbors[base - vertex_count + i].push(base + i);
                }
            }
        }
        for ring in &mut neighbors {
            ring.sort_unstable();
        }
        ResolutionGraph {
            vertex_count,
            frame_count,
            temporal,
            spatial_edges,
            neighbors,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn node_count(&self) -> usize {
        self.vertex_count * self.frame_count
    }

    pub fn is_temporal(&self) -> bool {
        self.temporal
    }

    pub fn spatial_edges(&self) -> &[(usize, usize)] {
        &self.spatial_edges
    }

    pub fn node(&self, frame: usize, vertex: usize) -> usize {
        frame * self.vertex_count + vertex
    }

    /// Nodes whose orientation and cycle count are pinned: vertex 0 of the
    /// first frame, or of every frame when frames are independent.
    pub fn is_gauge(&self, node: usize) -> bool {
        if self.vertex_count == 0 || node % self.vertex_count != 0 {
            return false;
        }
        !self.temporal || node == 0
    }

    /// All node pairs entering the objectives: spatial edges of every frame,
    /// then temporal pairs `(t−1, i) → (t, i)` when enabled.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for t in 0..self.frame_count {
            let base = t * self.vertex_count;
            out.extend(self.spatial_edges.iter().map(|&(a, b)| (base + a, base + b)));
        }
        if self.temporal {
            for t in 1..self.frame_count {
                for i in 0..self.vertex_count {
                    out.push((self.node(t - 1, i), self.node(t, i)));
                }
            }
        }
        out
    }

    /// Breadth-first visiting order with the parent of every node. Gauge nodes
    /// and the lowest unvisited node of each remaining component start new
    /// trees (parent `None`).
    fn spanning_order(&self) -> Vec<(usize, Option<usize>)> {
        let n = self.node_count();
        let mut visited = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let roots = (0..n).filter(|&v| self.is_gauge(v)).chain(0..n);
        for root in roots {
            if visited[root] {
                continue;
            }
            visited[root] = true;
            let mut queue = VecDeque::from([(root, None)]);
            while let Some((v, parent)) = queue.pop_front() {
                order.push((v, parent));
                for &w in &self.neighbors[v] {
                    if !visited[w] {
                        visited[w] = true;
                        queue.push_back((w, Some(v)));
                    }
                }
            }
        }
        order
    }
}

/// Orientation consistency `s(ω_a·ω_b, θ_a, θ_b)`: zero for near-identity
/// rotations or nearly perpendicular axes, otherwise the sign of the dot
/// product.
pub fn consistency(a: &AxisAngle, b: &AxisAngle, cfg: &ResolveConfig) -> i8 {
    if a.angle < cfg.eps2 || b.angle < cfg.eps2 {
        return 0;
    }
    let d = a.axis.dot(&b.axis);
    if d > cfg.eps1 {
        1
    } else if d < -cfg.eps1 {
        -1
    } else {
        0
    }
}

fn flat<'a>(raw: &'a [Vec<AxisAngle>], graph: &ResolutionGraph) -> impl Fn(usize) -> &'a AxisAngle + 'a {
    let v = graph.vertex_count;
    move |node| &raw[node / v][node % v]
}

/// Orientation objective: `Σ o_a o_b s(a, b)` over all spatial and temporal
/// pairs. Larger is better.
pub fn orientation_objective(
    graph: &ResolutionGraph,
    raw: &[Vec<AxisAngle>],
    orient: &[Vec<i8>],
    cfg: &ResolveConfig,
) -> i64 {
    let aa = flat(raw, graph);
    let v = graph.vertex_count;
    graph
        .pairs()
        .into_iter()
        .map(|(a, b)| {
            let o = orient[a / v][a % v] as i64 * orient[b / v][b % v] as i64;
            o * consistency(aa(a), aa(b), cfg) as i64
        })
        .sum()
}

/// Greedy propagation followed by single-flip refinement.
pub fn solve_orientations(
    graph: &ResolutionGraph,
    raw: &[Vec<AxisAngle>],
    cfg: &ResolveConfig,
) -> Vec<Vec<i8>> {
    let n = graph.node_count();
    let aa = flat(raw, graph);
    // Per-node neighbor list annotated with the pair consistency.
    let signed: Vec<Vec<(usize, i8)>> = (0..n)
        .map(|a| {
            graph.neighbors[a]
                .iter()
                .map(|&b| (b, consistency(aa(a), aa(b), cfg)))
                .collect()
        })
        .collect();

    let mut o = vec![0i8; n];
    for (node, _) in graph.spanning_order() {
        if graph.is_gauge(node) {
            o[node] = 1;
            continue;
        }
        let score: i32 = signed[node].iter().map(|&(b, s)| (o[b] * s) as i32).sum();
        o[node] = match score.cmp(&0) {
            std::cmp::Ordering::Less => -1,
            std::cmp::Ordering::Greater => 1,
            // All weights vanish (near-identity rotation): the objective does
            // not care, but the feature ω̂θ̂ does once θ̂ picks up whole turns,
            // so follow placed neighbors whose own axis means something.
            std::cmp::Ordering::Equal => {
                let pull: f64 = signed[node]
                    .iter()
                    .filter(|&&(b, _)| aa(b).angle > cfg.eps2)
                    .map(|&(b, _)| o[b] as f64 * aa(node).axis.dot(&aa(b).axis))
                    .sum();
                if pull < 0.0 {
                    -1
                } else {
                    1
                }
            }
        };
    }

    loop {
        let mut changed = false;
        for node in 0..n {
            if graph.is_gauge(node) {
                continue;
            }
            let field: i32 = signed[node].iter().map(|&(b, s)| (o[b] * s) as i32).sum();
            if (o[node] as i32) * field < 0 {
                o[node] = -o[node];
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    unflatten(&o, graph)
}

/// `o·θ + 2π r` for one node.
fn resolved(aa: &AxisAngle, o: i8, r: i32) -> f64 {
    o as f64 * aa.angle + TAU * r as f64
}

/// Angle objective: `Σ (θ̂_a − θ̂_b)²` over all spatial and temporal pairs.
/// Smaller is better.
pub fn cycle_objective(
    graph: &ResolutionGraph,
    raw: &[Vec<AxisAngle>],
    orient: &[Vec<i8>],
    cycles: &[Vec<i32>],
) -> f64 {
    let v = graph.vertex_count;
    let value = |node: usize| {
        let (t, i) = (node / v, node % v);
        resolved(&raw[t][i], orient[t][i], cycles[t][i])
    };
    graph
        .pairs()
        .into_iter()
        .map(|(a, b)| (value(a) - value(b)).powi(2))
        .sum()
}

/// Spanning-tree rounding followed by per-node optimal integer moves.
pub fn solve_cycles(graph: &ResolutionGraph, raw: &[Vec<AxisAngle>], orient: &[Vec<i8>]) -> Vec<Vec<i32>> {
    let n = graph.node_count();
    let v = graph.vertex_count;
    let base: Vec<f64> = (0..n)
        .map(|node| resolved(&raw[node / v][node % v], orient[node / v][node % v], 0))
        .collect();
    let mut r = vec![0i32; n];
    for (node, parent) in graph.spanning_order() {
        if graph.is_gauge(node) {
            continue;
        }
        if let Some(p) = parent {
            let target = base[p] + TAU * r[p] as f64;
            r[node] = ((target - base[node]) / TAU).round() as i32;
        }
    }

    let cost = |node: usize, rv: i32, r: &[i32]| -> f64 {
        let x = base[node] + TAU * rv as f64;
        graph.neighbors[node]
            .iter()
            .map(|&b| (x - base[b] - TAU * r[b] as f64).powi(2))
            .sum()
    };
    // Each accepted move strictly lowers the objective; the sweep cap only
    // guards against floating-point ties.
    for _ in 0..10_000 {
        let mut changed = false;
        for node in 0..n {
            if graph.is_gauge(node) || graph.neighbors[node].is_empty() {
                continue;
            }
            let ring = &graph.neighbors[node];
            let mean = ring.iter().map(|&b| base[b] + TAU * r[b] as f64).sum::<f64>() / ring.len() as f64;
            let best = ((mean - base[node]) / TAU).round() as i32;
            if best == r[node] {
                continue;
            }
            let current = cost(node, r[node], &r);
            let proposed = cost(node, best, &r);
            if proposed < current - 1e-12 * (1.0 + current) {
                r[node] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    unflatten(&r, graph)
}

fn unflatten<T: Copy>(flat: &[T], graph: &ResolutionGraph) -> Vec<Vec<T>> {
    if graph.vertex_count == 0 {
        return vec![Vec::new(); graph.frame_count];
    }
    flat.chunks(graph.vertex_count).map(|c| c.to_vec()).collect()
}
