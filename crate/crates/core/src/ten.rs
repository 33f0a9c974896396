//! Time-expanded networks: the discretized topology replicated across
//! timesteps 0..=T, with an edge (u, t) -> (v, t+k) for every base edge of
//! latency k that fits in the horizon. Self-edges (n, t) -> (n, t+1) exist
//! implicitly; both synthesizers model holding without materializing them.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::topology::{DiscreteTopology, NpuId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TenEdge {
    pub src: NpuId,
    pub depart: usize,
    pub dst: NpuId,
    pub arrive: usize,
}

#[derive(Debug, Clone)]
pub struct TimeExpandedNetwork {
    pub base: DiscreteTopology,
    pub horizon: usize,
    /// Cross-NPU edges ordered by (depart, src, dst) for reproducibility.
    edges: Vec<TenEdge>,
}

/// Unrolls the discretized topology over `horizon` timesteps.
pub fn expand(base: &DiscreteTopology, horizon: usize) -> Result<TimeExpandedNetwork> {
    if horizon == 0 {
        return Err(Error::InvalidHorizon);
    }
    let mut edges = Vec::new();
    for t in 0..horizon {
        for (src, dst, steps) in base.edges() {
            if t + steps <= horizon {
                edges.push(TenEdge {
                    src,
                    depart: t,
                    dst,
                    arrive: t + steps,
                });
            }
        }
    }
    Ok(TimeExpandedNetwork {
        base: base.clone(),
        horizon,
        edges,
    })
}

impl TimeExpandedNetwork {
    pub fn edges(&self) -> &[TenEdge] {
        &self.edges
    }

    pub fn num_nodes(&self) -> usize {
        self.base.num_npus * (self.horizon + 1)
    }

    /// Cross-NPU edges departing at timestep `t`. `t == horizon` is the
    /// postcondition layer and has no departures.
    pub fn edges_departing(&self, t: usize) -> Result<Vec<TenEdge>> {
        if t > self.horizon {
            return Err(Error::InvalidInput(format!(
                "timestep {t} beyond horizon {}",
                self.horizon
            )));
        }
        Ok(self.edges.iter().filter(|e| e.depart == t).copied().collect())
    }

    /// DOT dump with one rank per timestep; for debugging, no stability
    /// guarantee.
    pub fn to_dot(&self) -> String {
        let mut out = String::new();
        out.push_str("digraph ten {\n  rankdir=LR;\n  node [shape=circle];\n");
        for t in 0..=self.horizon {
            let _ = writeln!(out, "  {{ rank=same;");
            for n in 0..self.base.num_npus {
                let _ = writeln!(out, "    \"n{n}_t{t}\" [label=\"{n}@{t}\"];");
            }
            out.push_str("  }\n");
        }
        for n in 0..self.base.num_npus {
            for t in 0..self.horizon {
                let _ = writeln!(out, "  \"n{n}_t{t}\" -> \"n{n}_t{}\" [style=dashed];", t + 1);
            }
        }
        for e in &self.edges {
            let _ = writeln!(
                out,
                "  \"n{}_t{}\" -> \"n{}_t{}\";",
                e.src, e.depart, e.dst, e.arrive
            );
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_ring, discretize, RingVariant, Topology};

    fn ring3() -> DiscreteTopology {
        let t = build_ring(3, RingVariant::Uni, 0.5, 100.0).unwrap();
        discretize(&t, 1 << 20, None).unwrap()
    }

    #[test]
    fn ring3_ten3_counts() {
        let ten = expand(&ring3(), 3).unwrap();
        assert_eq!(ten.num_nodes(), 12);
        assert_eq!(ten.edges().len(), 9); // 3 links x 3 departure slots
    }

    #[test]
    fn cross_edge_count_formula() {
        let mut t = Topology::new("hetero", 3);
        t.add_link(0, 1, 1.0, 0.0).unwrap();
        t.add_link(1, 2, 2.0, 0.0).unwrap();
        t.add_link(2, 0, 1.0, 0.0).unwrap();
        let dt = discretize(&t, 1, Some(1.0)).unwrap();
        for horizon in 1..=6 {
            let ten = expand(&dt, horizon).unwrap();
            let expect: usize = dt
                .edges()
                .map(|(_, _, k)| (horizon + 1).saturating_sub(k).min(horizon))
                .sum();
            assert_eq!(ten.edges().len(), expect);
        }
    }

    #[test]
    fn heterogeneous_edges_respect_horizon() {
        let mut t = Topology::new("hetero", 2);
        t.add_link(0, 1, 2.0, 0.0).unwrap();
        t.add_link(1, 0, 1.0, 0.0).unwrap();
        let dt = discretize(&t, 1, Some(1.0)).unwrap();
        let ten = expand(&dt, 4).unwrap();
        // The 2-step edge only departs while it can still land by t=4.
        let departs: Vec<_> = ten
            .edges()
            .iter()
            .filter(|e| e.src == 0)
            .map(|e| e.depart)
            .collect();
        assert_eq!(departs, vec![0, 1, 2]);
        assert!(ten.edges_departing(3).unwrap().iter().all(|e| e.src == 1));
    }

    #[test]
    fn minimal_horizon() {
        let ten = expand(&ring3(), 1).unwrap();
        assert!(ten.edges().iter().all(|e| e.depart == 0));
        assert!(matches!(expand(&ring3(), 0), Err(Error::InvalidHorizon)));
    }

    #[test]
    fn edges_departing_bounds() {
        let ten = expand(&ring3(), 3).unwrap();
        assert_eq!(ten.edges_departing(0).unwrap().len(), 3);
        assert!(ten.edges_departing(3).unwrap().is_empty());
        assert!(ten.edges_departing(4).is_err());
    }

    #[test]
    fn edges_increase_time_and_expansion_is_pure() {
        let ten = expand(&ring3(), 3).unwrap();
        assert!(ten.edges().iter().all(|e| e.arrive > e.depart));
        let again = expand(&ring3(), 3).unwrap();
        assert_eq!(ten.edges(), again.edges());
    }

    #[test]
    fn dot_dump_mentions_every_node() {
        let ten = expand(&ring3(), 2).unwrap();
        let dot = ten.to_dot();
        assert!(dot.contains("\"n0_t0\""));
        assert!(dot.contains("\"n2_t2\""));
        assert!(dot.contains("style=dashed"));
    }
}
