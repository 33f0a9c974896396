//! Property tests for the structural invariants.

mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use collsynth::collective::{make_collective, CollectiveKind};
use collsynth::schedule::{invert_raw, prune_to_postcondition, verify, Provenance, Schedule};
use collsynth::solver::{check_assignment, solve, BinaryProgram, Relation, SolveStatus};
use collsynth::topology::{
    all_pairs_shortest_paths, build_mesh, build_ring, discretize, remove_npus, unwind_switch,
    RingVariant, SwitchSpec, Topology, INF_STEPS,
};

const MB: u64 = 1 << 20;

fn arb_topology() -> impl Strategy<Value = Topology> {
    prop_oneof![
        (2usize..9, any::<bool>()).prop_map(|(n, bi)| {
            let v = if bi { RingVariant::Bi } else { RingVariant::Uni };
            build_ring(n, v, 0.5, 100.0).unwrap()
        }),
        (1usize..5, 2usize..5).prop_map(|(r, c)| build_mesh(r, c, 0.5, 100.0).unwrap()),
        (3usize..8, 1usize..4).prop_map(|(n, d)| {
            let d = d.min(n - 1);
            unwind_switch(&SwitchSpec::new(n, 0.5, 120.0, d, RingVariant::Uni)).unwrap()
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Discretization never under-estimates: steps * factor >= delay.
    #[test]
    fn discretization_never_underestimates(
        topo in arb_topology(),
        chunk_kb in 1u64..4096,
        factor_scale in 0.1f64..4.0,
    ) {
        let chunk = chunk_kb * 1024;
        let base = discretize(&topo, chunk, None).unwrap();
        let factor = base.factor_us * factor_scale;
        let dt = discretize(&topo, chunk, Some(factor)).unwrap();
        for l in topo.links() {
            let steps = dt.steps(l.src, l.dst).unwrap();
            let delay = l.delay_us(chunk);
            prop_assert!(steps >= 1);
            prop_assert!(
                steps as f64 * factor >= delay - 1e-9 * delay.max(1.0),
                "{} steps x {factor} < {delay}",
                steps
            );
        }
        // The default factor maps the fastest link to exactly one step.
        let fastest = topo
            .links()
            .map(|l| l.delay_us(chunk))
            .fold(f64::INFINITY, f64::min);
        prop_assert!((base.factor_us - fastest).abs() < 1e-12);
        prop_assert!(base.edges().any(|(_, _, k)| k == 1));
    }

    /// Switch unwinding conserves aggregate egress bandwidth.
    #[test]
    fn unwinding_conserves_egress(n in 3usize..10, d in 1usize..9, bi in any::<bool>()) {
        let d = d.min(n - 1);
        let variant = if bi { RingVariant::Bi } else { RingVariant::Uni };
        let spec = SwitchSpec::new(n, 0.5, 120.0, d, variant);
        let topo = unwind_switch(&spec).unwrap();
        for npu in 0..n {
            let total: f64 = topo.out_links(npu).map(|l| 1.0 / l.beta_us_per_byte).sum();
            prop_assert!((total - 1.0 / spec.total_bw_beta).abs() < 1e-6);
        }
    }

    /// All-pairs shortest paths agree with single-source Dijkstra.
    #[test]
    fn apsp_matches_single_source(topo in arb_topology()) {
        let dt = discretize(&topo, MB, None).unwrap();
        let sp = all_pairs_shortest_paths(&dt);
        let n = dt.num_npus;
        for src in 0..n {
            // Dijkstra with usize weights.
            let mut dist = vec![INF_STEPS; n];
            dist[src] = 0;
            let mut heap = std::collections::BinaryHeap::new();
            heap.push(std::cmp::Reverse((0usize, src)));
            while let Some(std::cmp::Reverse((d, u))) = heap.pop() {
                if d > dist[u] {
                    continue;
                }
                for (v, k) in dt.out_edges(u) {
                    if d + k < dist[v] {
                        dist[v] = d + k;
                        heap.push(std::cmp::Reverse((d + k, v)));
                    }
                }
            }
            for v in 0..n {
                prop_assert_eq!(sp.dist(src, v), dist[v]);
            }
        }
    }

    /// Removing NPUs never shortens surviving routes.
    #[test]
    fn fault_injection_never_shortens_paths(
        rows in 2usize..5,
        cols in 2usize..5,
        fail_mask in 0u16..256,
    ) {
        let topo = build_mesh(rows, cols, 0.5, 100.0).unwrap();
        let n = topo.num_npus;
        let failed: BTreeSet<usize> = (0..n).filter(|&i| fail_mask >> (i % 16) & 1 == 1 && i % 3 == 0).collect();
        prop_assume!(failed.len() < n);
        let (cut, map) = remove_npus(&topo, &failed).unwrap();
        let sp_full = all_pairs_shortest_paths(&discretize(&topo, MB, None).unwrap());
        if cut.num_links() == 0 {
            return Ok(());
        }
        let sp_cut = all_pairs_shortest_paths(&discretize(&cut, MB, None).unwrap());
        for new_u in 0..cut.num_npus {
            for new_v in 0..cut.num_npus {
                let old_u = map.original_of_new[new_u];
                let old_v = map.original_of_new[new_v];
                let before = sp_full.dist(old_u, old_v);
                let after = sp_cut.dist(new_u, new_v);
                prop_assert!(after >= before, "{old_u}->{old_v}: {after} < {before}");
            }
        }
    }

    /// Inversion preserves horizon and send count and is an involution; the
    /// schedule JSON round-trips losslessly.
    #[test]
    fn inversion_and_serialization(n in 3usize..7, seed in 0u64..32) {
        let topo = build_ring(n, RingVariant::Bi, 0.5, 100.0).unwrap();
        let coll = make_collective(CollectiveKind::AllGather, n, 1, MB, None).unwrap();
        let s = collsynth::greedy::synthesize_greedy(&topo, &coll, MB, 1, seed).unwrap();
        prop_assert!(verify(&s, &topo, &coll).is_ok());

        let inv = invert_raw(&s);
        prop_assert_eq!(inv.horizon, s.horizon);
        prop_assert_eq!(inv.sends.len(), s.sends.len());
        let back = invert_raw(&inv);
        prop_assert_eq!(&back.sends, &s.sends);

        let text = s.to_json().unwrap();
        let loaded = Schedule::from_json(&text).unwrap();
        prop_assert_eq!(&loaded, &s);
        prop_assert_eq!(loaded.to_json().unwrap(), text);
    }

    /// Pruning keeps schedules verifier-clean and never grows them.
    #[test]
    fn pruning_preserves_correctness(n in 3usize..7, seed in 0u64..32) {
        let topo = build_mesh(2, n.div_euclid(2).max(2), 0.5, 100.0).unwrap();
        let num = topo.num_npus;
        let coll = make_collective(CollectiveKind::Broadcast, num, 1, MB, Some(seed as usize % num)).unwrap();
        let s = collsynth::greedy::synthesize_greedy(&topo, &coll, MB, 1, seed).unwrap();
        let pruned = prune_to_postcondition(&s.sends, &coll);
        prop_assert!(pruned.len() <= s.sends.len());
        let ps = Schedule::new(
            &topo.name,
            s.factor_us,
            MB,
            pruned,
            Provenance::new("pruned", seed, "prop"),
        );
        prop_assert!(verify(&ps, &topo, &coll).is_ok());
    }

    /// Solver agreement with exhaustive enumeration on programs of up to 14
    /// variables.
    #[test]
    fn solver_matches_enumeration(
        nv in 1usize..15,
        rows in proptest::collection::vec(
            (proptest::collection::vec((0u32..15, -3i8..4), 1..5), -2i8..5, 0u8..3),
            0..6,
        ),
        objs in proptest::collection::vec(-3i8..5, 15),
    ) {
        let mut p = BinaryProgram::new("prop");
        for (j, &c) in objs.iter().take(nv).enumerate() {
            p.add_var(format!("x{j}"), c as f64);
        }
        for (coeffs, rhs, rel) in rows {
            let mut seen = std::collections::BTreeSet::new();
            let coeffs: Vec<(u32, f64)> = coeffs
                .into_iter()
                .filter(|&(v, a)| (v as usize) < nv && a != 0 && seen.insert(v))
                .map(|(v, a)| (v, a as f64))
                .collect();
            if coeffs.is_empty() {
                continue;
            }
            let rel = match rel {
                0 => Relation::Le,
                1 => Relation::Ge,
                _ => Relation::Eq,
            };
            p.add_row(coeffs, rel, rhs as f64);
        }

        let mut best: Option<f64> = None;
        for mask in 0u32..(1 << nv) {
            let assignment: Vec<bool> = (0..nv).map(|j| mask >> j & 1 == 1).collect();
            if check_assignment(&p, &assignment).is_ok() {
                let obj = p.objective_of(&assignment);
                if best.is_none_or(|b| obj > b) {
                    best = Some(obj);
                }
            }
        }
        let r = solve(&p, std::time::Duration::from_secs(30), 0);
        match best {
            Some(obj) => {
                prop_assert_eq!(r.status, SolveStatus::Optimal);
                prop_assert_eq!(r.objective_value, obj.round() as i64);
                check_assignment(&p, &r.assignment.unwrap()).unwrap();
            }
            None => prop_assert_eq!(r.status, SolveStatus::Infeasible),
        }
    }
}
