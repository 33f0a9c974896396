//! Exact collective synthesis: encode the matching problem on a
//! time-expanded network as a 0-1 integer program, grow the horizon from its
//! lower bound until full delivery is feasible, and fall back to
//! shortest-path recovery or windowed time clustering when the search
//! budget runs out.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use crate::collective::{ChunkId, Collective, CollectiveKind};
use crate::error::{Error, Result};
use crate::greedy;
use crate::schedule::{prune_to_postcondition, Provenance, Schedule, Send};
use crate::solver::{
    solve_with, BinaryProgram, Relation, SolveOptions, SolveStatus,
};
use crate::ten::{expand, TimeExpandedNetwork};
use crate::topology::{
    all_pairs_shortest_paths, discretize, DiscreteTopology, NpuId, ShortestPaths, Topology,
    INF_STEPS,
};

/// Knobs shared by the exact synthesizers.
#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    /// Total wall-clock budget for the synthesis.
    pub time_limit: Duration,
    /// Window length in timesteps for clustered synthesis; 0 disables it.
    pub cluster_window: usize,
    /// Overrides the computed horizon lower bound.
    pub t_f_start: Option<usize>,
    /// Drop the congestion (unit link capacity) constraints.
    pub taccl_like: bool,
    pub rng_seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            time_limit: Duration::from_secs(60),
            cluster_window: 0,
            t_f_start: None,
            taccl_like: false,
            rng_seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = format!(
            "time_limit={:?};cluster_window={};t_f_start={:?};taccl_like={};seed={}",
            self.time_limit, self.cluster_window, self.t_f_start, self.taccl_like, self.rng_seed
        );
        let hash = Sha256::digest(text.as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn synthesizer_name(&self) -> &'static str {
        if self.taccl_like {
            "taccl-like"
        } else {
            "ilp"
        }
    }
}

/// The 0-1 program for one horizon: boolean hold and sent tables tied by
/// consistency, persistence, acquisition, and congestion rows, maximizing
/// postcondition holds summed over t = 1..=horizon.
pub struct IlpModel {
    pub program: BinaryProgram,
    /// hold(c, n, t) variable indices.
    pub hold_vars: BTreeMap<(ChunkId, NpuId, usize), usize>,
    /// sent(c, s, d, t) variable indices, keyed (t, s, d, c) so the solver's
    /// first-unfixed order follows the lexicographic tie-break.
    pub sent_vars: BTreeMap<(usize, NpuId, NpuId, ChunkId), usize>,
    pub horizon: usize,
}

impl IlpModel {
    /// Pins every postcondition hold at the horizon, turning the maximization
    /// into a full-delivery feasibility probe. Returns false when a pin
    /// contradicts a distance fixing (the horizon is provably too short).
    pub fn pin_postcondition(&mut self, collective: &Collective) -> bool {
        for &(c, n) in &collective.postcondition {
            let var = self.hold_vars[&(c, n, self.horizon)];
            match self.program.fix_of(var) {
                Some(false) => return false,
                _ => self.program.fix_var(var, true),
            }
        }
        true
    }
}

/// Earliest possible hold time per (chunk, npu): the distance from the
/// nearest precondition holder. Used for model presolve and the horizon
/// lower bound.
fn earliest_holds(
    collective: &Collective,
    sp: &ShortestPaths,
    num_npus: usize,
) -> BTreeMap<(ChunkId, NpuId), usize> {
    let mut earliest = BTreeMap::new();
    for chunk in &collective.chunks {
        for n in 0..num_npus {
            let best = collective
                .holders(chunk.id)
                .map(|h| sp.dist(h, n))
                .min()
                .unwrap_or(INF_STEPS);
            earliest.insert((chunk.id, n), best);
        }
    }
    earliest
}

/// Builds the four constraint families over the TEN. Preconditions are
/// pinned as variable bounds, along with the distance-implied zero holds
/// (a presolve inference, not an extra constraint family).
pub fn build_model(
    ten: &TimeExpandedNetwork,
    collective: &Collective,
    config: &SynthesisConfig,
) -> Result<IlpModel> {
    collective.validate()?;
    let dt = &ten.base;
    let n = dt.num_npus;
    let horizon = ten.horizon;
    let sp = all_pairs_shortest_paths(dt);
    let earliest = earliest_holds(collective, &sp, n);
    for &(c, npu) in &collective.postcondition {
        if earliest[&(c, npu)] == INF_STEPS {
            return Err(Error::UnreachableDestination { chunk: c, npu });
        }
    }

    let post: BTreeSet<(ChunkId, NpuId)> = collective.postcondition.iter().copied().collect();
    let mut program = BinaryProgram::new(format!("ten{}_{}", horizon, dt.name));

    // Sent variables first, in (t, src, dst, chunk) order.
    let mut sent_vars = BTreeMap::new();
    for edge in ten.edges() {
        for chunk in &collective.chunks {
            let var = program.add_var(
                format!("s_{}_{}_{}_{}", chunk.id, edge.src, edge.dst, edge.depart),
                0.0,
            );
            sent_vars.insert((edge.depart, edge.src, edge.dst, chunk.id), var);
        }
    }
    let mut hold_vars = BTreeMap::new();
    for chunk in &collective.chunks {
        for npu in 0..n {
            for t in 0..=horizon {
                let objective = if t >= 1 && post.contains(&(chunk.id, npu)) {
                    1.0
                } else {
                    0.0
                };
                let var = program.add_var(format!("h_{}_{}_{t}", chunk.id, npu), objective);
                hold_vars.insert((chunk.id, npu, t), var);
            }
        }
    }

    // Precondition pinning and distance presolve.
    for chunk in &collective.chunks {
        for npu in 0..n {
            let dist = earliest[&(chunk.id, npu)];
            if dist == 0 {
                program.fix_var(hold_vars[&(chunk.id, npu, 0)], true);
            } else {
                for t in 0..=horizon.min(dist.saturating_sub(1)) {
                    program.fix_var(hold_vars[&(chunk.id, npu, t)], false);
                }
                if dist > horizon {
                    for t in 0..=horizon {
                        program.fix_var(hold_vars[&(chunk.id, npu, t)], false);
                    }
                }
            }
        }
    }

    // Consistency: a send needs the chunk held at the source on departure and
    // implies the destination holds it on arrival.
    for (&(t, src, dst, c), &sent) in &sent_vars {
        let k = dt.steps(src, dst).expect("sent var follows a TEN edge");
        let src_hold = hold_vars[&(c, src, t)];
        program.add_row(
            vec![(sent as u32, 1.0), (src_hold as u32, -1.0)],
            Relation::Le,
            0.0,
        );
        let dst_hold = hold_vars[&(c, dst, t + k)];
        program.add_row(
            vec![(sent as u32, 1.0), (dst_hold as u32, -1.0)],
            Relation::Le,
            0.0,
        );
    }

    // Persistence and acquisition: holds never vanish, and a new hold needs
    // an arriving send.
    for chunk in &collective.chunks {
        for npu in 0..n {
            for t in 1..=horizon {
                let cur = hold_vars[&(chunk.id, npu, t)];
                let prev = hold_vars[&(chunk.id, npu, t - 1)];
                program.add_row(
                    vec![(prev as u32, 1.0), (cur as u32, -1.0)],
                    Relation::Le,
                    0.0,
                );
                let mut acq = vec![(cur as u32, 1.0), (prev as u32, -1.0)];
                for (src, k) in dt.in_edges(npu) {
                    if t >= k {
                        if let Some(&sent) = sent_vars.get(&(t - k, src, npu, chunk.id)) {
                            acq.push((sent as u32, -1.0));
                        }
                    }
                }
                program.add_row(acq, Relation::Le, 0.0);
            }
        }
    }

    // Congestion: one chunk per link per occupancy window [t, t+k). Dropped
    // entirely in TACCL-like mode.
    if !config.taccl_like {
        for (src, dst, k) in dt.edges() {
            for t in 0..horizon {
                let mut row = Vec::new();
                for tau in t..(t + k).min(horizon) {
                    for chunk in &collective.chunks {
                        if let Some(&sent) = sent_vars.get(&(tau, src, dst, chunk.id)) {
                            row.push((sent as u32, 1.0));
                        }
                    }
                }
                if row.len() > 1 {
                    program.add_row(row, Relation::Le, 1.0);
                }
            }
        }
    }

    Ok(IlpModel {
        program,
        hold_vars,
        sent_vars,
        horizon,
    })
}

/// Decodes a solved assignment into the pruned send list.
pub fn decode(model: &IlpModel, dt: &DiscreteTopology, collective: &Collective, assignment: &[bool]) -> Vec<Send> {
    let mut sends = Vec::new();
    for (&(t, src, dst, chunk), &var) in &model.sent_vars {
        if assignment[var] {
            sends.push(Send {
                chunk,
                src,
                dst,
                depart: t,
                steps: dt.steps(src, dst).expect("sent var follows a TEN edge"),
            });
        }
    }
    prune_to_postcondition(&sends, collective)
}

/// Encodes a concrete schedule as a model assignment (warm start).
fn encode_assignment(model: &IlpModel, schedule: &Schedule, collective: &Collective) -> Option<Vec<bool>> {
    if schedule.horizon > model.horizon {
        return None;
    }
    let holds = schedule.hold_times(collective);
    let mut assignment = vec![false; model.program.num_vars()];
    for (&(c, n, t), &var) in &model.hold_vars {
        if holds.get(&(c, n)).is_some_and(|&at| at <= t) {
            assignment[var] = true;
        }
    }
    for send in &schedule.sends {
        let var = model
            .sent_vars
            .get(&(send.depart, send.src, send.dst, send.chunk))?;
        assignment[*var] = true;
    }
    crate::solver::check_assignment(&model.program, &assignment)
        .ok()
        .map(|_| assignment)
}

/// Number of greedy runs used to seed exact searches; matches the seed
/// derivation of `synthesize_greedy` so shared seeds give shared schedules.
const WARM_RUNS: usize = 8;

fn rung_budget(total: Duration) -> Duration {
    let cap = total / 16;
    cap.clamp(Duration::from_millis(500), Duration::from_secs(120))
}

struct Context<'a> {
    topology: &'a Topology,
    dt: DiscreteTopology,
    sp: ShortestPaths,
    collective: &'a Collective,
    chunk_size: u64,
    config: &'a SynthesisConfig,
}

impl<'a> Context<'a> {
    fn new(
        topology: &'a Topology,
        collective: &'a Collective,
        chunk_size: u64,
        config: &'a SynthesisConfig,
    ) -> Result<Self> {
        collective.validate()?;
        let dt = discretize(topology, chunk_size, None)?;
        let sp = all_pairs_shortest_paths(&dt);
        Ok(Context {
            topology,
            dt,
            sp,
            collective,
            chunk_size,
            config,
        })
    }

    /// Horizon lower bound: the farthest any needed chunk must travel.
    fn lower_bound(&self) -> Result<Option<usize>> {
        let mut lb = None;
        for &(c, npu) in &self.collective.postcondition {
            if self.collective.precondition.contains(&(c, npu)) {
                continue;
            }
            let dist = self
                .collective
                .holders(c)
                .map(|h| self.sp.dist(h, npu))
                .min()
                .unwrap_or(INF_STEPS);
            if dist == INF_STEPS {
                return Err(Error::UnreachableDestination { chunk: c, npu });
            }
            lb = Some(lb.map_or(dist, |b: usize| b.max(dist)));
        }
        Ok(lb)
    }

    fn empty_schedule(&self, name: &str) -> Schedule {
        Schedule::new(
            &self.topology.name,
            self.dt.factor_us,
            self.chunk_size,
            Vec::new(),
            Provenance::new(name, self.config.rng_seed, self.config.digest()),
        )
    }

    fn schedule_from(&self, name: &str, sends: Vec<Send>, optimal: Option<bool>) -> Schedule {
        let mut provenance =
            Provenance::new(name, self.config.rng_seed, self.config.digest());
        provenance.optimal_steps = optimal;
        Schedule::new(
            &self.topology.name,
            self.dt.factor_us,
            self.chunk_size,
            sends,
            provenance,
        )
    }
}

/// Exact synthesis of any collective via the horizon-growing loop; combining
/// kinds go through counterpart inversion and all-reduce composition.
pub fn synthesize(
    topology: &Topology,
    collective: &Collective,
    chunk_size: u64,
    config: &SynthesisConfig,
) -> Result<Schedule> {
    crate::driver::synthesize(
        topology,
        collective,
        chunk_size,
        &crate::driver::Synthesizer::Ilp(config.clone()),
    )
}

/// Windowed exact synthesis of any collective (`config.cluster_window` sets
/// the window length).
pub fn synthesize_clustered(
    topology: &Topology,
    collective: &Collective,
    chunk_size: u64,
    config: &SynthesisConfig,
) -> Result<Schedule> {
    crate::driver::synthesize(
        topology,
        collective,
        chunk_size,
        &crate::driver::Synthesizer::Clustered(config.clone()),
    )
}

/// Exact synthesis of a non-combining collective: grow the horizon from its
/// lower bound, probing full delivery with the pinned model, until the first
/// feasible horizon. Falls back to shortest-path recovery on timeout.
pub(crate) fn synthesize_noncombining(
    topology: &Topology,
    collective: &Collective,
    chunk_size: u64,
    config: &SynthesisConfig,
) -> Result<Schedule> {
    let ctx = Context::new(topology, collective, chunk_size, config)?;
    let deadline = Instant::now() + config.time_limit;
    let name = config.synthesizer_name();

    let Some(lb) = ctx.lower_bound()? else {
        return Ok(ctx.empty_schedule(name)); // postcondition already met
    };
    // Deterministic greedy incumbent; guarantees the horizon ladder
    // terminates and the result is never worse than the seed.
    let seed_schedule = greedy::best_of_k(
        topology,
        collective,
        chunk_size,
        WARM_RUNS,
        config.rng_seed,
    )?;

    let start = config.t_f_start.unwrap_or(lb).max(lb).max(1);
    let mut all_proven = true;
    let mut t_f = start;
    while Instant::now() < deadline {
        let ten = expand(&ctx.dt, t_f)?;
        let mut model = build_model(&ten, collective, config)?;
        if !model.pin_postcondition(collective) {
            t_f += 1;
            continue; // distance pins prove this horizon short
        }
        let warm = if seed_schedule.horizon <= t_f {
            encode_assignment(&model, &seed_schedule, collective)
        } else {
            None
        };
        let budget = rung_budget(config.time_limit).min(deadline.saturating_duration_since(Instant::now()));
        let result = solve_with(
            &model.program,
            &SolveOptions {
                warm_start: warm,
                ..SolveOptions::new(budget, config.rng_seed)
            },
        );
        match result.status {
            SolveStatus::Optimal | SolveStatus::FeasibleIncumbent => {
                let assignment = result.assignment.expect("status carries an assignment");
                let sends = decode(&model, &ctx.dt, collective, &assignment);
                return Ok(ctx.schedule_from(name, sends, Some(all_proven)));
            }
            SolveStatus::Infeasible => {
                t_f += 1;
            }
            SolveStatus::TimeoutNoIncumbent => {
                all_proven = false;
                t_f += 1;
            }
        }
    }
    // Budget exhausted: complete the empty partial via shortest paths.
    let partial = ctx.empty_schedule(name);
    let mut recovered = recover_early_termination(&partial, &ctx.dt, collective)?;
    recovered.provenance.optimal_steps = Some(false);
    Ok(recovered)
}

/// Completes a prefix-valid partial schedule: every unmet postcondition pair
/// gets the chunk from its nearest holder along a shortest path, scheduled at
/// the earliest slots that respect link occupancy.
pub fn recover_early_termination(
    partial: &Schedule,
    dt: &DiscreteTopology,
    collective: &Collective,
) -> Result<Schedule> {
    let sp = all_pairs_shortest_paths(dt);
    let mut holds = partial.hold_times(collective);
    let mut busy: BTreeMap<(NpuId, NpuId), Vec<(usize, usize)>> = BTreeMap::new();
    for s in &partial.sends {
        busy.entry((s.src, s.dst))
            .or_default()
            .push((s.depart, s.arrive()));
    }
    for windows in busy.values_mut() {
        windows.sort_unstable();
    }

    let mut sends = partial.sends.clone();
    for &(chunk, npu) in &collective.postcondition {
        if holds.contains_key(&(chunk, npu)) {
            continue;
        }
        // Nearest holder by discretized distance, ties to the smallest id.
        let holder = holds
            .iter()
            .filter(|&(&(c, _), _)| c == chunk)
            .map(|(&(_, h), &at)| (h, at))
            .filter(|&(h, _)| sp.reachable(h, npu))
            .min_by_key(|&(h, _)| (sp.dist(h, npu), h));
        let Some((holder, mut ready)) = holder else {
            return Err(Error::UnreachableDestination { chunk, npu });
        };
        let path = sp.path(holder, npu).expect("holder is reachable");
        for hop in path.windows(2) {
            let (u, v) = (hop[0], hop[1]);
            let steps = dt.steps(u, v).expect("path follows edges");
            let windows = busy.entry((u, v)).or_default();
            let depart = earliest_free_slot(windows, ready, steps);
            let pos = windows.partition_point(|&(s, _)| s < depart);
            windows.insert(pos, (depart, depart + steps));
            sends.push(Send {
                chunk,
                src: u,
                dst: v,
                depart,
                steps,
            });
            ready = depart + steps;
            let entry = holds.entry((chunk, v)).or_insert(ready);
            *entry = (*entry).min(ready);
        }
    }
    let mut out = Schedule::new(
        &partial.topology_name,
        partial.factor_us,
        partial.chunk_bytes,
        sends,
        partial.provenance.clone(),
    );
    out.horizon = out.horizon.max(partial.horizon);
    Ok(out)
}

/// First t >= ready such that [t, t+steps) misses every busy window.
fn earliest_free_slot(windows: &[(usize, usize)], ready: usize, steps: usize) -> usize {
    let mut t = ready;
    for &(start, end) in windows {
        if t + steps <= start {
            break;
        }
        if t < end {
            t = end;
        }
    }
    t
}

/// Arrival targets for one clustering window: the unmet postcondition pairs
/// plus every useful relay pair, i.e. (chunk, npu) where the NPU sits
/// strictly closer to some unmet requester than every current holder. Without
/// relay credit a short window would always prefer a nearby delivery over
/// moving a far chunk forward, stalling rooted collectives.
fn window_postcondition(
    collective: &Collective,
    holds: &BTreeSet<(ChunkId, NpuId)>,
    sp: &ShortestPaths,
    num_npus: usize,
) -> BTreeSet<(ChunkId, NpuId)> {
    let mut best: BTreeMap<ChunkId, Vec<usize>> = BTreeMap::new();
    for chunk in &collective.chunks {
        best.insert(chunk.id, vec![INF_STEPS; num_npus]);
    }
    for &(c, h) in holds {
        let dists = best.get_mut(&c).expect("hold of a known chunk");
        for (n, slot) in dists.iter_mut().enumerate() {
            *slot = (*slot).min(sp.dist(h, n));
        }
    }
    let mut post: BTreeSet<(ChunkId, NpuId)> = collective
        .postcondition
        .iter()
        .filter(|p| !holds.contains(p))
        .copied()
        .collect();
    let unmet = post.clone();
    for &(c, n) in &unmet {
        let dists = &best[&c];
        for m in 0..num_npus {
            if holds.contains(&(c, m)) || dists[m] == INF_STEPS {
                continue;
            }
            if sp.dist(m, n) < dists[n] {
                post.insert((c, m));
            }
        }
    }
    post
}

/// Windowed synthesis: solve maximize-arrivals on short TEN windows,
/// committing each window's sends and feeding the resulting holds forward as
/// the next precondition, until the postcondition is met.
pub(crate) fn synthesize_clustered_noncombining(
    topology: &Topology,
    collective: &Collective,
    chunk_size: u64,
    config: &SynthesisConfig,
) -> Result<Schedule> {
    let w = config.cluster_window;
    if w == 0 {
        return Err(Error::InvalidSpec(
            "clustered synthesis needs cluster_window >= 1".into(),
        ));
    }
    let ctx = Context::new(topology, collective, chunk_size, config)?;
    let deadline = Instant::now() + config.time_limit;
    if ctx.lower_bound()?.is_none() {
        return Ok(ctx.empty_schedule("clustered"));
    }

    let window_budget = (config.time_limit / 32)
        .clamp(Duration::from_millis(250), Duration::from_secs(5));
    let mut holds: BTreeSet<(ChunkId, NpuId)> = collective.precondition.clone();
    let mut all_sends: Vec<Send> = Vec::new();
    let mut offset = 0usize;
    let mut window_index = 0usize;

    loop {
        let unmet: Vec<(ChunkId, NpuId)> = collective
            .postcondition
            .iter()
            .filter(|p| !holds.contains(p))
            .copied()
            .collect();
        if unmet.is_empty() {
            break;
        }
        if Instant::now() >= deadline {
            // Out of budget: finish the remaining pairs by shortest paths.
            let mut partial = ctx.schedule_from("clustered", all_sends, Some(false));
            partial.horizon = partial.horizon.max(offset);
            let mut recovered = recover_early_termination(&partial, &ctx.dt, collective)?;
            recovered.provenance.optimal_steps = Some(false);
            return Ok(recovered);
        }

        let window_coll = Collective {
            kind: CollectiveKind::Custom,
            chunks: collective.chunks.clone(),
            precondition: holds.clone(),
            postcondition: window_postcondition(collective, &holds, &ctx.sp, ctx.dt.num_npus),
            combining: false,
            root: None,
        };
        let ten = expand(&ctx.dt, w)?;
        let model = build_model(&ten, &window_coll, config)?;

        // Greedy warm start over the same window.
        let seed_sends = greedy::GreedyRun::new(
            &ctx.dt,
            &ctx.sp,
            &window_coll,
            greedy::derived_seed(config.rng_seed, window_index),
        )?
        .run(Some(w))?;
        let seed_schedule = Schedule::new(
            &topology.name,
            ctx.dt.factor_us,
            chunk_size,
            seed_sends,
            Provenance::new("clustered", config.rng_seed, config.digest()),
        );
        let warm = encode_assignment(&model, &seed_schedule, &window_coll);

        let budget = window_budget.min(deadline.saturating_duration_since(Instant::now()));
        let result = solve_with(
            &model.program,
            &SolveOptions {
                warm_start: warm,
                ..SolveOptions::new(budget, config.rng_seed)
            },
        );
        let window_sends = match result.assignment {
            Some(assignment) => {
                let mut sends = Vec::new();
                for (&(t, src, dst, chunk), &var) in &model.sent_vars {
                    if assignment[var] {
                        sends.push(Send {
                            chunk,
                            src,
                            dst,
                            depart: t,
                            steps: ctx.dt.steps(src, dst).expect("TEN edge"),
                        });
                    }
                }
                sends
            }
            None => seed_schedule.sends.clone(),
        };

        // New holds reached in this window; keep only the chains that
        // produced them.
        let replay = Schedule::new(
            &topology.name,
            ctx.dt.factor_us,
            chunk_size,
            window_sends,
            Provenance::new("clustered", 0, ""),
        );
        let window_holds = replay.hold_times(&window_coll);
        let new_holds: BTreeSet<(ChunkId, NpuId)> = window_holds
            .keys()
            .filter(|p| !holds.contains(*p))
            .copied()
            .collect();
        if new_holds.is_empty() {
            return Err(Error::Stall(format!(
                "window {window_index} made no progress (window {w} too short, or unreachable)"
            )));
        }
        let progress_coll = Collective {
            kind: CollectiveKind::Custom,
            chunks: collective.chunks.clone(),
            precondition: holds.clone(),
            postcondition: new_holds.iter().copied().collect(),
            combining: false,
            root: None,
        };
        let kept = prune_to_postcondition(&replay.sends, &progress_coll);
        all_sends.extend(kept.into_iter().map(|s| Send {
            depart: s.depart + offset,
            ..s
        }));
        holds.extend(new_holds);
        offset += w;
        window_index += 1;
    }

    let sends = prune_to_postcondition(&all_sends, collective);
    // Windowed search makes no optimality claim of its own.
    Ok(ctx.schedule_from("clustered", sends, None))
}
