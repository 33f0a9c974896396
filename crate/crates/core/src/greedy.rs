//! Scalable randomized greedy chunk-to-link matching: one matching round per
//! discretized timestep, shorter-link-first source selection, in-flight
//! replacement of outdated transmissions, and best-of-k jitter mitigation.
//!
//! Matching order: all useful (chunk, target) demands of a tick are ranked by
//! how far the delivered chunk still has to travel to its neediest unmet
//! requester (farthest first), shuffling ties with the run's RNG. A target is
//! useful either because it requests the chunk itself or because it lies
//! strictly closer to an unmet requester than every current holder, which
//! lets rooted collectives relay through non-requesting NPUs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::collective::{ChunkId, Collective};
use crate::error::{Error, Result};
use crate::evaluator::evaluate;
use crate::schedule::{prune_to_postcondition, Provenance, Schedule, Send};
use crate::topology::{
    all_pairs_shortest_paths, discretize, DiscreteTopology, NpuId, ShortestPaths, INF_STEPS,
};

/// Seed for the i-th independent run of a best-of-k search. The ILP warm
/// start reuses this so the two synthesizers can share identical seeds.
pub fn derived_seed(seed: u64, run: usize) -> u64 {
    seed.wrapping_add(run as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Flight {
    chunk: ChunkId,
    src: NpuId,
    dst: NpuId,
    depart: usize,
    arrive: usize,
}

/// A cancelled in-flight transmission and the send that took over its link
/// slot, if any.
#[derive(Debug, Clone, Copy)]
pub struct Substitution {
    pub cancelled: Send,
    pub replacement: Option<Send>,
}

/// Mutable search state of one greedy run.
pub struct GreedyState {
    pub clock: usize,
    /// Per NPU: chunk -> arrival timestep (sendable once clock >= arrival).
    holds: Vec<BTreeMap<ChunkId, usize>>,
    in_flight: Vec<Flight>,
    link_busy_until: BTreeMap<(NpuId, NpuId), usize>,
    rng: ChaCha8Rng,
}

/// One greedy synthesis run over a discretized topology.
pub struct GreedyRun<'a> {
    dt: &'a DiscreteTopology,
    sp: &'a ShortestPaths,
    collective: &'a Collective,
    pub state: GreedyState,
    /// Postcondition pairs not yet satisfied.
    unmet: std::collections::BTreeSet<(ChunkId, NpuId)>,
    /// Requesters per dense chunk index (from the postcondition).
    requesters: Vec<Vec<NpuId>>,
    /// Min distance from any current holder to each NPU, per dense chunk.
    best_dist: Vec<Vec<usize>>,
    /// Earliest in-flight arrival per (chunk, dst).
    en_route: BTreeMap<(ChunkId, NpuId), usize>,
    chunk_idx: BTreeMap<ChunkId, usize>,
    sends: Vec<Send>,
    idle_ticks: usize,
}

impl<'a> GreedyRun<'a> {
    pub fn new(
        dt: &'a DiscreteTopology,
        sp: &'a ShortestPaths,
        collective: &'a Collective,
        seed: u64,
    ) -> Result<Self> {
        let n = dt.num_npus;
        if let Some(max) = collective.max_npu() {
            if max >= n {
                return Err(Error::InvalidSpec(format!(
                    "collective references NPU {max} on a {n}-NPU topology"
                )));
            }
        }
        let chunk_idx: BTreeMap<ChunkId, usize> = collective
            .chunks
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id, i))
            .collect();
        let nc = collective.chunks.len();
        let mut holds: Vec<BTreeMap<ChunkId, usize>> = vec![BTreeMap::new(); n];
        let mut best_dist = vec![vec![INF_STEPS; n]; nc];
        for &(c, npu) in &collective.precondition {
            holds[npu].insert(c, 0);
            let ci = chunk_idx[&c];
            for v in 0..n {
                best_dist[ci][v] = best_dist[ci][v].min(sp.dist(npu, v));
            }
        }
        let mut requesters = vec![Vec::new(); nc];
        let mut unmet = std::collections::BTreeSet::new();
        for &(c, npu) in &collective.postcondition {
            requesters[chunk_idx[&c]].push(npu);
            if !collective.precondition.contains(&(c, npu)) {
                unmet.insert((c, npu));
                if best_dist[chunk_idx[&c]][npu] == INF_STEPS {
                    return Err(Error::UnreachableDestination { chunk: c, npu });
                }
            }
        }
        Ok(GreedyRun {
            dt,
            sp,
            collective,
            state: GreedyState {
                clock: 0,
                holds,
                in_flight: Vec::new(),
                link_busy_until: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            unmet,
            requesters,
            best_dist,
            en_route: BTreeMap::new(),
            chunk_idx,
            sends: Vec::new(),
            idle_ticks: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.unmet.is_empty()
    }

    fn record_hold(&mut self, chunk: ChunkId, npu: NpuId, at: usize) {
        let entry = self.state.holds[npu].entry(chunk).or_insert(at);
        *entry = (*entry).min(at);
        self.unmet.remove(&(chunk, npu));
        let ci = self.chunk_idx[&chunk];
        for v in 0..self.dt.num_npus {
            let d = self.sp.dist(npu, v);
            if d < self.best_dist[ci][v] {
                self.best_dist[ci][v] = d;
            }
        }
    }

    /// How far the chunk would still need to travel from `target` to its
    /// neediest unmet requester, or None when delivering it there is useless.
    /// A delivery is useful when the target strictly improves on every
    /// current holder for some unmet requester (targets requesting the chunk
    /// themselves satisfy this with distance zero).
    fn usefulness(&self, chunk: ChunkId, target: NpuId) -> Option<usize> {
        if self.state.holds[target].contains_key(&chunk) {
            return None;
        }
        let ci = self.chunk_idx[&chunk];
        let mut best: Option<usize> = None;
        for &n in &self.requesters[ci] {
            if !self.unmet.contains(&(chunk, n)) {
                continue;
            }
            let via = self.sp.dist(target, n);
            if via < self.best_dist[ci][n] && best.is_none_or(|b| via > b) {
                best = Some(via);
            }
        }
        best
    }

    /// Cancels in-flight sends whose chunk meanwhile arrived at the
    /// destination through another path, substituting a still-needed chunk
    /// from the same source on the freed link slot when one exists.
    pub fn replace_outdated(&mut self) -> Vec<Substitution> {
        self.replace_outdated_capped(None)
    }

    fn replace_outdated_capped(&mut self, arrive_by: Option<usize>) -> Vec<Substitution> {
        let clock = self.state.clock;
        let mut subs = Vec::new();
        let mut idx = 0;
        while idx < self.state.in_flight.len() {
            let f = self.state.in_flight[idx];
            let arrived_elsewhere = self.state.holds[f.dst]
                .get(&f.chunk)
                .is_some_and(|&at| at <= clock);
            if !arrived_elsewhere {
                idx += 1;
                continue;
            }
            self.state.in_flight.swap_remove(idx);
            self.sends.retain(|s| {
                !(s.chunk == f.chunk && s.src == f.src && s.dst == f.dst && s.depart == f.depart)
            });
            self.refresh_en_route(f.chunk, f.dst);
            self.state.link_busy_until.insert((f.src, f.dst), clock);
            let cancelled = Send {
                chunk: f.chunk,
                src: f.src,
                dst: f.dst,
                depart: f.depart,
                steps: f.arrive - f.depart,
            };

            // Pick the most useful replacement chunk held by the source.
            let steps = self.dt.steps(f.src, f.dst).expect("flight used a real link");
            let fits = arrive_by.is_none_or(|cap| clock + steps <= cap);
            let candidates: Vec<(usize, ChunkId)> = if !fits {
                Vec::new()
            } else {
                self.state.holds[f.src]
                    .iter()
                    .filter(|&(_, &at)| at <= clock)
                    .filter_map(|(&c, _)| {
                        if self
                            .en_route
                            .get(&(c, f.dst))
                            .is_some_and(|&a| a <= clock + steps)
                        {
                            return None;
                        }
                        self.usefulness(c, f.dst).map(|remaining| (remaining, c))
                    })
                    .collect()
            };
            let replacement = self.pick_max(&candidates).map(|c| {
                self.commit(c, f.src, f.dst, steps);
                Send {
                    chunk: c,
                    src: f.src,
                    dst: f.dst,
                    depart: clock,
                    steps,
                }
            });
            subs.push(Substitution {
                cancelled,
                replacement,
            });
        }
        subs
    }

    fn refresh_en_route(&mut self, chunk: ChunkId, dst: NpuId) {
        let earliest = self
            .state
            .in_flight
            .iter()
            .filter(|f| f.chunk == chunk && f.dst == dst)
            .map(|f| f.arrive)
            .min();
        match earliest {
            Some(a) => {
                self.en_route.insert((chunk, dst), a);
            }
            None => {
                self.en_route.remove(&(chunk, dst));
            }
        }
    }

    fn pick_max(&mut self, candidates: &[(usize, ChunkId)]) -> Option<ChunkId> {
        let best = candidates.iter().map(|&(p, _)| p).max()?;
        let tied: Vec<ChunkId> = candidates
            .iter()
            .filter(|&&(p, _)| p == best)
            .map(|&(_, c)| c)
            .collect();
        Some(tied[self.state.rng.gen_range(0..tied.len())])
    }

    fn commit(&mut self, chunk: ChunkId, src: NpuId, dst: NpuId, steps: usize) {
        let clock = self.state.clock;
        self.state.in_flight.push(Flight {
            chunk,
            src,
            dst,
            depart: clock,
            arrive: clock + steps,
        });
        self.state.link_busy_until.insert((src, dst), clock + steps);
        let entry = self.en_route.entry((chunk, dst)).or_insert(usize::MAX);
        *entry = (*entry).min(clock + steps);
        self.sends.push(Send {
            chunk,
            src,
            dst,
            depart: clock,
            steps,
        });
    }

    fn commit_arrivals(&mut self) {
        let clock = self.state.clock;
        let mut arrived = Vec::new();
        let mut idx = 0;
        while idx < self.state.in_flight.len() {
            if self.state.in_flight[idx].arrive <= clock {
                arrived.push(self.state.in_flight.swap_remove(idx));
            } else {
                idx += 1;
            }
        }
        for f in arrived {
            self.record_hold(f.chunk, f.dst, f.arrive);
            self.refresh_en_route(f.chunk, f.dst);
        }
    }

    /// One matching round: ranks every useful (chunk, target) demand and
    /// greedily assigns free links, preferring the shortest candidate link
    /// into each target and breaking ties uniformly at random.
    ///
    /// `arrive_by` caps arrivals (used by windowed searches).
    pub fn match_step(&mut self, arrive_by: Option<usize>) -> Vec<Send> {
        let clock = self.state.clock;
        // Candidate targets: out-neighbors of current holders.
        let mut demands: Vec<(usize, u32, ChunkId, NpuId)> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for src in 0..self.dt.num_npus {
            let chunks: Vec<ChunkId> = self.state.holds[src]
                .iter()
                .filter(|&(_, &at)| at <= clock)
                .map(|(&c, _)| c)
                .collect();
            if chunks.is_empty() {
                continue;
            }
            for (dst, _) in self.dt.out_edges(src) {
                for &c in &chunks {
                    if seen.insert((c, dst)) {
                        if let Some(remaining) = self.usefulness(c, dst) {
                            let jitter: u32 = self.state.rng.gen();
                            demands.push((remaining, jitter, c, dst));
                        }
                    }
                }
            }
        }
        // Farthest-first; the random key shuffles within each distance class.
        demands.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut committed = Vec::new();
        for (_, _, chunk, dst) in demands {
            if self.state.holds[dst].contains_key(&chunk) {
                continue;
            }
            let pending = self.en_route.get(&(chunk, dst)).copied();
            // Candidate sources: in-neighbors holding the chunk with a free
            // link; keep only those beating any in-flight arrival.
            let mut best_steps = usize::MAX;
            let mut tied: Vec<NpuId> = Vec::new();
            for (src, steps) in self.dt.in_edges(dst) {
                if !self.state.holds[src]
                    .get(&chunk)
                    .is_some_and(|&at| at <= clock)
                {
                    continue;
                }
                if self
                    .state
                    .link_busy_until
                    .get(&(src, dst))
                    .is_some_and(|&b| b > clock)
                {
                    continue;
                }
                if pending.is_some_and(|a| clock + steps >= a) {
                    continue;
                }
                if arrive_by.is_some_and(|cap| clock + steps > cap) {
                    continue;
                }
                match steps.cmp(&best_steps) {
                    std::cmp::Ordering::Less => {
                        best_steps = steps;
                        tied = vec![src];
                    }
                    std::cmp::Ordering::Equal => tied.push(src),
                    std::cmp::Ordering::Greater => {}
                }
            }
            if tied.is_empty() {
                continue;
            }
            let src = tied[self.state.rng.gen_range(0..tied.len())];
            self.commit(chunk, src, dst, best_steps);
            committed.push(Send {
                chunk,
                src,
                dst,
                depart: clock,
                steps: best_steps,
            });
        }
        committed
    }

    /// Advances one tick. Returns an error if the watchdog detects no
    /// progress for far longer than any transmission could take.
    pub fn tick(&mut self, arrive_by: Option<usize>) -> Result<()> {
        self.replace_outdated_capped(arrive_by);
        self.commit_arrivals();
        if self.is_done() {
            return Ok(());
        }
        let new_sends = self.match_step(arrive_by);
        if new_sends.is_empty() && self.state.in_flight.is_empty() {
            self.idle_ticks += 1;
            let limit = self.dt.num_npus * self.dt.max_steps() * self.collective.chunks.len() + 2;
            if arrive_by.is_none() && self.idle_ticks > limit {
                return Err(Error::Stall(format!(
                    "no progress for {} idle ticks at clock {}",
                    self.idle_ticks, self.state.clock
                )));
            }
        } else {
            self.idle_ticks = 0;
        }
        self.state.clock += 1;
        Ok(())
    }

    /// Runs to completion (or until `max_ticks` in windowed mode) and returns
    /// the committed sends. Windowed runs only ever commit sends arriving
    /// within the window, so those all count as delivered; an unlimited run
    /// drops transmissions still in flight when the postcondition was met.
    pub fn run(mut self, max_ticks: Option<usize>) -> Result<Vec<Send>> {
        loop {
            if self.is_done() {
                break;
            }
            if max_ticks.is_some_and(|cap| self.state.clock >= cap) {
                break;
            }
            self.tick(max_ticks)?;
        }
        if max_ticks.is_none() {
            let in_flight = std::mem::take(&mut self.state.in_flight);
            for f in in_flight {
                self.sends.retain(|s| {
                    !(s.chunk == f.chunk && s.src == f.src && s.dst == f.dst && s.depart == f.depart)
                });
            }
        }
        Ok(self.sends)
    }
}

/// Randomized greedy synthesis of any collective: `runs` independent seeded
/// searches, returning the schedule with the lowest evaluated collective
/// time. Combining collectives go through counterpart inversion.
pub fn synthesize_greedy(
    topology: &crate::topology::Topology,
    collective: &Collective,
    chunk_size: u64,
    runs: usize,
    seed: u64,
) -> Result<Schedule> {
    crate::driver::synthesize(
        topology,
        collective,
        chunk_size,
        &crate::driver::Synthesizer::Greedy { runs, seed },
    )
}

/// One full greedy synthesis with a single seed over a non-combining
/// collective. Returns the pruned send list.
pub(crate) fn greedy_once(
    dt: &DiscreteTopology,
    sp: &ShortestPaths,
    collective: &Collective,
    seed: u64,
) -> Result<Vec<Send>> {
    let run = GreedyRun::new(dt, sp, collective, seed)?;
    let sends = run.run(None)?;
    Ok(prune_to_postcondition(&sends, collective))
}

/// Best-of-k greedy synthesis for a non-combining collective: k independent
/// seeded runs in parallel, selected by continuous-time evaluated cost with
/// ties broken by the lowest run index.
pub(crate) fn best_of_k(
    topology: &crate::topology::Topology,
    collective: &Collective,
    chunk_size: u64,
    runs: usize,
    seed: u64,
) -> Result<Schedule> {
    if runs == 0 {
        return Err(Error::InvalidSize("runs must be >= 1".into()));
    }
    collective.validate()?;
    let dt = discretize(topology, chunk_size, None)?;
    let sp = all_pairs_shortest_paths(&dt);
    let attempts: Vec<Result<(usize, f64, Schedule)>> = (0..runs)
        .into_par_iter()
        .map(|i| {
            let sends = greedy_once(&dt, &sp, collective, derived_seed(seed, i))?;
            let schedule = Schedule::new(
                &topology.name,
                dt.factor_us,
                chunk_size,
                sends,
                Provenance::new("greedy", seed, format!("runs={runs}")),
            );
            let cost = evaluate(&schedule, topology, chunk_size)?.collective_time_us;
            Ok((i, cost, schedule))
        })
        .collect();
    let mut best: Option<(usize, f64, Schedule)> = None;
    for attempt in attempts {
        let (i, cost, schedule) = attempt?;
        let better = match &best {
            None => true,
            Some((bi, bc, _)) => cost < *bc - 1e-12 || (cost <= *bc + 1e-12 && i < *bi),
        };
        if better {
            best = Some((i, cost, schedule));
        }
    }
    Ok(best.expect("runs >= 1").2)
}
