mod support;

use deformtx::tsacap::{cycle_objective, orientation_objective, solve_cycles, solve_orientations, ResolveConfig};
use support::{best_cycles, best_orientation_objective, folded_instance};

#[test]
fn greedy_solvers_match_exhaustive_optima() {
    let cfg = ResolveConfig::default();
    for seed in 0..50 {
        let (graph, raw) = folded_instance(seed);
        let orient = solve_orientations(&graph, &raw, &cfg);
        let greedy_o = orientation_objective(&graph, &raw, &orient, &cfg);
        assert_eq!(greedy_o, best_orientation_objective(&graph, &raw, &cfg), "orientation, instance {seed}");

        let cycles = solve_cycles(&graph, &raw, &orient);
        let greedy_r = cycle_objective(&graph, &raw, &orient, &cycles);
        let best = cycle_objective(&graph, &raw, &orient, &best_cycles(&graph, &raw, &orient));
        assert_eq!(greedy_r, best, "cycles, instance {seed}");
    }
}

#[test]
fn oracle_finds_strictly_better_assignments_than_a_bad_guess() {
    // Sanity check on the oracle itself: all-zero cycles are not optimal once folds occur.
    let cfg = ResolveConfig::default();
    let mut improved = 0;
    for seed in 0..50 {
        let (graph, raw) = folded_instance(seed);
        let orient = solve_orientations(&graph, &raw, &cfg);
        let zeros = vec![vec![0; graph.vertex_count()]; graph.frame_count()];
        let best = cycle_objective(&graph, &raw, &orient, &best_cycles(&graph, &raw, &orient));
        let naive = cycle_objective(&graph, &raw, &orient, &zeros);
        assert!(best <= naive);
        if best < naive {
            improved += 1;
        }
    }
    assert!(improved >= 10, "only {improved} instances had nontrivial cycles");
}

#[test]
fn branch_and_bound_agrees_with_plain_enumeration() {
    let cfg = ResolveConfig::default();
    let mut checked = 0;
    for seed in 0..400 {
        let (graph, raw) = folded_instance(seed);
        if graph.vertex_count() > 3 {
            continue;
        }
        checked += 1;
        let n = graph.node_count();
        let v = graph.vertex_count();
        let free: Vec<usize> = (0..n).filter(|&x| !graph.is_gauge(x)).collect();
        let unflat = |flat: &[i32]| -> Vec<Vec<i32>> { flat.chunks(v).map(|c| c.to_vec()).collect() };

        let mut best_o = i64::MIN;
        for mask in 0u32..(1 << free.len()) {
            let mut o = vec![1i32; n];
            for (k, &x) in free.iter().enumerate() {
                if mask >> k & 1 == 1 {
                    o[x] = -1;
                }
            }
            let o8: Vec<Vec<i8>> = unflat(&o).into_iter().map(|r| r.into_iter().map(|x| x as i8).collect()).collect();
            best_o = best_o.max(orientation_objective(&graph, &raw, &o8, &cfg));
        }
        assert_eq!(best_o, support::best_orientation_objective(&graph, &raw, &cfg), "instance {seed}");

        let orient = solve_orientations(&graph, &raw, &cfg);
        let mut best_r = f64::INFINITY;
        let total = 5usize.pow(free.len() as u32);
        for code in 0..total {
            let mut r = vec![0i32; n];
            let mut c = code;
            for &x in &free {
                r[x] = (c % 5) as i32 - 2;
                c /= 5;
            }
            best_r = best_r.min(cycle_objective(&graph, &raw, &orient, &unflat(&r)));
        }
        let bb = cycle_objective(&graph, &raw, &orient, &best_cycles(&graph, &raw, &orient));
        assert_eq!(bb, best_r, "instance {seed}");
    }
    assert!(checked >= 10, "{checked}");
}
