//! Shared helpers for the acceptance suite: experiment topologies, the
//! multi-tenant merge used in the correctness matrix, random small instances,
//! and an exhaustive minimal-horizon oracle that is independent of the
//! synthesizers (breadth-first search over per-timestep link matchings).
//!
//! Compiled into several test binaries; not all of them use every helper.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use collsynth::collective::{
    make_collective, merge_collectives, Chunk, Collective, CollectiveKind, TenantPlacement,
};
use collsynth::topology::{
    all_pairs_shortest_paths, build_fully_connected, build_ring, compose_hierarchical, discretize,
    unwind_switch, RingVariant, SwitchSpec, Topology,
};

pub const MB: u64 = 1 << 20;

/// The multi-node experiment system: nodes of Ring(2) x FC(4) joined by a
/// degree-1 unwound switch ring, with 200/100/50 GB/s links.
pub fn ring_fc_switch(nodes: usize) -> Topology {
    let ring = build_ring(2, RingVariant::Bi, 0.5, 200.0).unwrap();
    let fc = build_fully_connected(4, 0.5, 100.0).unwrap();
    if nodes == 1 {
        compose_hierarchical(&[ring, fc]).unwrap()
    } else {
        let sw = unwind_switch(&SwitchSpec::new(nodes, 0.5, 50.0, 1, RingVariant::Uni)).unwrap();
        compose_hierarchical(&[ring, fc, sw]).unwrap()
    }
}

/// Multi-tenant workload over an n-NPU system: a broadcast on the lower half
/// merged with an all-gather on the upper half. Needs n >= 4.
pub fn multi_tenant(num_npus: usize, chunk_size: u64) -> Option<Collective> {
    let lower = num_npus / 2;
    let upper = num_npus - lower;
    if lower < 2 || upper < 2 {
        return None;
    }
    let bc = make_collective(CollectiveKind::Broadcast, lower, 1, chunk_size, Some(0)).unwrap();
    let ag = make_collective(CollectiveKind::AllGather, upper, 1, chunk_size, None).unwrap();
    Some(
        merge_collectives(&[
            TenantPlacement {
                collective: bc,
                npu_map: (0..lower).collect(),
            },
            TenantPlacement {
                collective: ag,
                npu_map: (lower..num_npus).collect(),
            },
        ])
        .unwrap(),
    )
}

/// A random small synthesis instance with unit link latencies: a connected
/// directed graph plus a single-source collective whose postcondition is
/// reachable. Suitable for the exhaustive oracle.
pub struct TinyInstance {
    pub topology: Topology,
    pub collective: Collective,
}

pub struct XorShift(pub u64);

impl XorShift {
    pub fn next(&mut self) -> u64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        self.0
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }
}

pub fn random_tiny_instance(rng: &mut XorShift) -> Option<TinyInstance> {
    let n = 3 + rng.below(2) as usize; // 3 or 4 NPUs
    let mut topo = Topology::new(format!("tiny{n}"), n);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    let target_links = (n + rng.below(3) as usize).min(6);
    let mut added = 0;
    while added < target_links && !pairs.is_empty() {
        let idx = rng.below(pairs.len() as u64) as usize;
        let (s, d) = pairs.swap_remove(idx);
        topo.add_link(s, d, 1.0, 0.0).unwrap();
        added += 1;
    }
    if topo.num_links() == 0 {
        return None;
    }
    let dt = discretize(&topo, 1, Some(1.0)).unwrap();
    let sp = all_pairs_shortest_paths(&dt);

    let num_chunks = 1 + rng.below(3) as usize; // up to 3 chunks
    let mut chunks = Vec::new();
    let mut pre = BTreeSet::new();
    let mut post = BTreeSet::new();
    for c in 0..num_chunks {
        let src = rng.below(n as u64) as usize;
        chunks.push(Chunk { id: c, size_bytes: 1 });
        pre.insert((c, src));
        let dests = 1 + rng.below(n as u64 - 1) as usize;
        let mut attempts = 0;
        let mut placed = 0;
        while placed < dests && attempts < 12 {
            attempts += 1;
            let d = rng.below(n as u64) as usize;
            if d != src && sp.reachable(src, d) && post.insert((c, d)) {
                placed += 1;
            }
        }
    }
    if post.is_empty() {
        return None;
    }
    let collective = Collective {
        kind: CollectiveKind::Custom,
        chunks,
        precondition: pre,
        postcondition: post,
        combining: false,
        root: None,
    };
    collective.validate().ok()?;
    Some(TinyInstance {
        topology: topo,
        collective,
    })
}

/// Exhaustive minimal-horizon search for unit-latency instances:
/// breadth-first over hold states, where each timestep assigns at most one
/// sendable chunk to every link. Dominated successor states are pruned
/// (holding more is never worse).
pub fn oracle_min_steps(topology: &Topology, collective: &Collective) -> Option<usize> {
    let n = topology.num_npus;
    let chunk_ids: Vec<usize> = collective.chunks.iter().map(|c| c.id).collect();
    let bit = |c_idx: usize, npu: usize| 1u64 << (c_idx * n + npu);
    assert!(chunk_ids.len() * n <= 64, "oracle state must fit in u64");

    let mut start: u64 = 0;
    for (ci, &c) in chunk_ids.iter().enumerate() {
        for npu in 0..n {
            if collective.precondition.contains(&(c, npu)) {
                start |= bit(ci, npu);
            }
        }
    }
    let mut goal: u64 = 0;
    for (ci, &c) in chunk_ids.iter().enumerate() {
        for npu in 0..n {
            if collective.postcondition.contains(&(c, npu)) {
                goal |= bit(ci, npu);
            }
        }
    }
    let links: Vec<(usize, usize)> = topology.links().map(|l| (l.src, l.dst)).collect();

    let mut frontier: Vec<u64> = vec![start];
    let mut seen: HashSet<u64> = frontier.iter().copied().collect();
    for t in 0..=24usize {
        if frontier.iter().any(|&s| s & goal == goal) {
            return Some(t);
        }
        let mut next: HashSet<u64> = HashSet::new();
        for &state in &frontier {
            // Per-link choices: idle or any chunk held at the source.
            let mut partial: Vec<u64> = vec![state];
            for &(src, dst) in &links {
                let mut grown = Vec::with_capacity(partial.len() * 2);
                for &acc in &partial {
                    grown.push(acc); // idle
                    for ci in 0..chunk_ids.len() {
                        if state & bit(ci, src) != 0 {
                            grown.push(acc | bit(ci, dst));
                        }
                    }
                }
                // Dedup aggressively to keep the product small.
                grown.sort_unstable();
                grown.dedup();
                partial = grown;
            }
            next.extend(partial);
        }
        // Domination pruning: drop states covered by a superset state.
        let mut states: Vec<u64> = next.into_iter().collect();
        states.sort_unstable_by_key(|s| std::cmp::Reverse(s.count_ones()));
        let mut kept: Vec<u64> = Vec::new();
        'outer: for s in states {
            for &k in &kept {
                if k & s == s {
                    continue 'outer;
                }
            }
            kept.push(s);
        }
        frontier = kept.into_iter().filter(|s| seen.insert(*s)).collect();
        if frontier.is_empty() {
            return None;
        }
    }
    None
}

pub fn post_is_trivial(collective: &Collective) -> bool {
    collective
        .postcondition
        .iter()
        .all(|p| collective.precondition.contains(p))
}
