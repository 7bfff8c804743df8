//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::f64::consts::{PI, TAU};

use deformtx::defgrad::rotation;
use deformtx::tsacap::solver::consistency;
use deformtx::tsacap::{cycle_objective, to_axis_angle, AxisAngle, ResolutionGraph, ResolveConfig};
use deformtx::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small connected graph (3..=10 vertices, spanning tree plus a few chords)
/// carrying a smooth 3-frame rotation field whose angles range over
/// roughly ±3π, so canonical extraction folds both angles and axes.
pub fn folded_instance(seed: u64) -> (ResolutionGraph, Vec<Vec<AxisAngle>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = rng.gen_range(3..=10);
    let mut edges = Vec::new();
    for i in 1..v {
        edges.push((rng.gen_range(0..i), i));
    }
    for _ in 0..rng.gen_range(0..=v) {
        let (a, b) = (rng.gen_range(0..v), rng.gen_range(0..v));
        if a != b {
            edges.push((a, b));
        }
    }
    let frames = 3;
    let graph = ResolutionGraph::new(v, &edges, frames, true);
    let base_axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
    let start = rng.gen_range(-2.0 * PI..2.0 * PI);
    let speed = rng.gen_range(-1.2..1.2);
    let offsets: Vec<f64> = (0..v).map(|_| rng.gen_range(-0.4..0.4)).collect();
    let tilts: Vec<Vec3> = (0..v)
        .map(|_| Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)))
        .collect();
    let raw = (0..frames)
        .map(|t| {
            (0..v)
                .map(|i| {
                    let angle = start + speed * t as f64 + offsets[i];
                    let axis = (base_axis + tilts[i]).normalize();
                    to_axis_angle(&rotation(&axis, angle), ResolveConfig::default().eps2)
                })
                .collect()
        })
        .collect();
    (graph, raw)
}

/// Nodes in breadth-first order from node 0 over the graph's pairs.
fn bfs_order(n: usize, pairs: &[(usize, usize)]) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in pairs {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for root in 0..n {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut q = VecDeque::from([root]);
        while let Some(x) = q.pop_front() {
            order.push(x);
            for &y in &adj[x] {
                if !seen[y] {
                    seen[y] = true;
                    q.push_back(y);
                }
            }
        }
    }
    order
}

/// Exact maximum of `Σ o_a o_b s(a, b)` over all `o ∈ {±1}^n` with the gauge
/// nodes fixed to +1, by depth-first enumeration with an admissible bound.
pub fn best_orientation_objective(graph: &ResolutionGraph, raw: &[Vec<AxisAngle>], cfg: &ResolveConfig) -> i64 {
    let v = graph.vertex_count();
    let n = graph.node_count();
    let pairs = graph.pairs();
    let aa = |node: usize| &raw[node / v][node % v];
    let order = bfs_order(n, &pairs);
    let mut pos = vec![0; n];
    for (k, &node) in order.iter().enumerate() {
        pos[node] = k;
    }
    // Each pair is scored when its later endpoint (in `order`) is assigned.
    let mut closing: Vec<Vec<(usize, i64)>> = vec![Vec::new(); n];
    let mut slack_after = vec![0i64; n + 1];
    for &(a, b) in &pairs {
        let s = consistency(aa(a), aa(b), cfg) as i64;
        let (early, late) = if pos[a] < pos[b] { (a, b) } else { (b, a) };
        closing[pos[late]].push((early, s));
        slack_after[pos[late]] += s.abs();
    }
    // slack_after[k] = Σ|s| over pairs closed at positions ≥ k.
    for k in (0..n).rev() {
        slack_after[k] += slack_after[k + 1];
    }
    fn search(
        k: usize,
        value: i64,
        o: &mut Vec<i8>,
        ctx: &(&[usize], &[Vec<(usize, i64)>], &[i64], &dyn Fn(usize) -> bool),
        best: &mut i64,
    ) {
        let (order, closing, slack, gauge) = *ctx;
        if value + slack[k] <= *best {
            return;
        }
        if k == order.len() {
            *best = value;
            return;
        }
        let node = order[k];
        let choices: &[i8] = if gauge(node) { &[1] } else { &[1, -1] };
        for &c in choices {
            o[node] = c;
            let gain: i64 = closing[k].iter().map(|&(e, s)| (c * o[e]) as i64 * s).sum();
            search(k + 1, value + gain, o, ctx, best);
        }
    }
    let mut best = i64::MIN;
    let mut o = vec![0i8; n];
    let gauge = |node: usize| graph.is_gauge(node);
    search(0, 0, &mut o, &(&order, &closing, &slack_after, &gauge), &mut best);
    best
}

/// Exact minimum of `Σ (θ̂_a − θ̂_b)²` over `r ∈ {−2..2}^n` (gauge nodes at
/// 0) for fixed orientations, returned as the minimizing assignment.
pub fn best_cycles(graph: &ResolutionGraph, raw: &[Vec<AxisAngle>], orient: &[Vec<i8>]) -> Vec<Vec<i32>> {
    let v = graph.vertex_count();
    let n = graph.node_count();
    let pairs = graph.pairs();
    let base: Vec<f64> = (0..n).map(|x| orient[x / v][x % v] as f64 * raw[x / v][x % v].angle).collect();
    let order = bfs_order(n, &pairs);
    let mut pos = vec![0; n];
    for (k, &node) in order.iter().enumerate() {
        pos[node] = k;
    }
    let mut earlier: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in &pairs {
        let (e, l) = if pos[a] < pos[b] { (a, b) } else { (b, a) };
        earlier[l].push(e);
    }
    struct Ctx<'a> {
        order: &'a [usize],
        earlier: &'a [Vec<usize>],
        base: &'a [f64],
        gauge: &'a dyn Fn(usize) -> bool,
    }
    let value = |base: &[f64], node: usize, r: i32| base[node] + TAU * r as f64;
    let local = |ctx: &Ctx, r: &[i32], node: usize, rv: i32| -> f64 {
        ctx.earlier[node]
            .iter()
            .map(|&e| (value(ctx.base, node, rv) - value(ctx.base, e, r[e])).powi(2))
            .sum()
    };
    fn search(
        k: usize,
        cost: f64,
        r: &mut Vec<i32>,
        ctx: &Ctx,
        local: &dyn Fn(&Ctx, &[i32], usize, i32) -> f64,
        best: &mut (f64, Vec<i32>),
    ) {
        // Costs are nonnegative, so the partial sum bounds every completion.
        if cost >= best.0 * (1.0 + 1e-12) + 1e-12 {
            return;
        }
        if k == ctx.order.len() {
            if cost < best.0 {
                *best = (cost, r.clone());
            }
            return;
        }
        let node = ctx.order[k];
        let mut options: Vec<(f64, i32)> = if (ctx.gauge)(node) {
            vec![(local(ctx, r, node, 0), 0)]
        } else {
            (-2..=2).map(|c| (local(ctx, r, node, c), c)).collect()
        };
        options.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (add, c) in options {
            r[node] = c;
            search(k + 1, cost + add, r, ctx, local, best);
        }
        r[node] = 0;
    }
    let gauge = |node: usize| graph.is_gauge(node);
    let ctx = Ctx {
        order: &order,
        earlier: &earlier,
        base: &base,
        gauge: &gauge,
    };
    let mut best = (f64::INFINITY, vec![0; n]);
    let mut r = vec![0i32; n];
    search(0, 0.0, &mut r, &ctx, &local, &mut best);
    let flat = best.1;
    let cycles: Vec<Vec<i32>> = flat.chunks(v).map(|c| c.to_vec()).collect();
    debug_assert!(cycle_objective(graph, raw, orient, &cycles).is_finite());
    cycles
}

/// Direct double-loop RMSE.
pub fn rmse_oracle(a: &[Vec<Vec3>], b: &[Vec<Vec3>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for t in 0..a.len() {
        for i in 0..a[t].len() {
            let d = a[t][i] - b[t][i];
            sum += d.x * d.x + d.y * d.y + d.z * d.z;
            n += 1.0;
        }
    }
    (sum / n).sqrt()
}

fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.dot(&ab)).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Point–triangle distance from the plane projection when it falls inside the
/// triangle, otherwise the nearest of the three edges.
pub fn point_triangle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let (u, v) = (b - a, c - a);
    let w = p - a;
    // Solve [u·u u·v; u·v v·v] [s t]ᵀ = [w·u w·v]ᵀ for the projection a + s u + t v.
    let (uu, uv, vv) = (u.dot(&u), u.dot(&v), v.dot(&v));
    let (wu, wv) = (w.dot(&u), w.dot(&v));
    let det = uu * vv - uv * uv;
    let s = (wu * vv - wv * uv) / det;
    let t = (wv * uu - wu * uv) / det;
    if s >= 0.0 && t >= 0.0 && s + t <= 1.0 {
        return (w - u * s - v * t).norm();
    }
    segment_distance(p, a, b).min(segment_distance(p, b, c)).min(segment_distance(p, c, a))
}

/// Exhaustive symmetric Hausdorff distance between vertex sets and triangles.
pub fn hausdorff_oracle(pa: &[Vec3], fa: &[[usize; 3]], pb: &[Vec3], fb: &[[usize; 3]]) -> f64 {
    let one_way = |ps: &[Vec3], qs: &[Vec3], faces: &[[usize; 3]]| {
        ps.iter()
            .map(|p| {
                faces
                    .iter()
                    .map(|f| point_triangle_distance(p, &qs[f[0]], &qs[f[1]], &qs[f[2]]))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    one_way(pa, pb, fb).max(one_way(pb, pa, fa))
}

/// Direct-summation STED with unit temporal weight; edges are collected from
/// the faces here rather than taken from the mesh.
pub fn sted_oracle(faces: &[[usize; 3]], a: &[Vec<Vec3>], b: &[Vec<Vec3>]) -> f64 {
    let mut edges = std::collections::BTreeSet::new();
    for f in faces {
        for k in 0..3 {
            let (i, j) = (f[k], f[(k + 1) % 3]);
            edges.insert((i.min(j), i.max(j)));
        }
    }
    let (mut s, mut sn) = (0.0, 0.0);
    for t in 0..a.len() {
        for &(i, j) in &edges {
            let la = (a[t][i] - a[t][j]).norm();
            let lb = (b[t][i] - b[t][j]).norm();
            s += ((lb - la) / la).powi(2);
            sn += 1.0;
        }
    }
    let (mut m, mut mn) = (0.0, 0.0);
    for t in 1..a.len() {
        for i in 0..a[t].len() {
            let d = (b[t][i] - b[t - 1][i]) - (a[t][i] - a[t - 1][i]);
            m += d.dot(&d);
            mn += 1.0;
        }
    }
    let spatial = (s / sn).sqrt();
    let temporal = if mn > 0.0 { (m / mn).sqrt() } else { 0.0 };
    (spatial * spatial + temporal * temporal).sqrt()
}

/// Randomly jittered `n×n` grid sequence and a perturbed copy.
pub fn random_sequence_pair(seed: u64, n: usize, frames: usize, noise: f64) -> (deformtx::Mesh, Vec<Vec<Vec3>>, Vec<Vec<Vec3>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mesh = deformtx::mesh::grid(n, n, 1.0, 1.0).unwrap();
    let mut jitter = |s: f64| Vec3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s));
    let a: Vec<Vec<Vec3>> = (0..frames).map(|_| mesh.vertices().iter().map(|p| p + jitter(0.1)).collect()).collect();
    let b = a.iter().map(|f| f.iter().map(|p| p + jitter(noise)).collect()).collect();
    (mesh, a, b)
}
