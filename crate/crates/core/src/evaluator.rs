//! Continuous-time replay of schedules under the alpha-beta model with
//! FIFO-exclusive links, plus the Ring and Direct baseline generators.
//!
//! The replay measures the synthesized plan rather than improving it: each
//! link serves its sends one at a time in (discretized departure, chunk-id)
//! order, and a send becomes ready once its chunk's delivery to the source
//! has completed.

use std::collections::BTreeMap;

use serde_json::json;

use crate::collective::{Collective, CollectiveKind};
use crate::error::{Error, Result};
use crate::schedule::{Provenance, Schedule, Send};
use crate::topology::{all_pairs_shortest_paths, discretize, NpuId, ShortestPaths, Topology};

#[derive(Debug, Clone, Copy)]
pub struct SendTiming {
    pub send: Send,
    pub start_us: f64,
    pub end_us: f64,
}

#[derive(Debug, Clone)]
pub struct CostReport {
    /// Completion time of the last arrival, in microseconds.
    pub collective_time_us: f64,
    /// Busy fraction per link over the collective duration.
    pub per_link_utilization: BTreeMap<(NpuId, NpuId), f64>,
    /// Peak number of sends simultaneously queued or in service on any link.
    pub max_congestion: usize,
    pub timeline: Vec<SendTiming>,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        let links: BTreeMap<String, f64> = self
            .per_link_utilization
            .iter()
            .map(|(&(s, d), &u)| (format!("{s}->{d}"), u))
            .collect();
        serde_json::to_string_pretty(&json!({
            "collective_time_us": self.collective_time_us,
            "per_link_utilization": links,
            "max_congestion": self.max_congestion,
        }))
        .expect("report serialization cannot fail")
    }

    pub fn timeline_csv(&self) -> String {
        let mut out = String::from("chunk,src,dst,depart_step,start_us,end_us\n");
        for t in &self.timeline {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t.send.chunk, t.send.src, t.send.dst, t.send.depart, t.start_us, t.end_us
            ));
        }
        out
    }
}

/// Replays a schedule in continuous time and reports its cost.
pub fn evaluate(s: &Schedule, topology: &Topology, chunk_size: u64) -> Result<CostReport> {
    let mut link_free: BTreeMap<(NpuId, NpuId), f64> = BTreeMap::new();
    let mut link_busy: BTreeMap<(NpuId, NpuId), f64> = BTreeMap::new();
    // Deliveries per (chunk, npu): (discrete arrival, continuous completion).
    let mut deliveries: BTreeMap<(usize, NpuId), Vec<(usize, f64)>> = BTreeMap::new();
    let mut timeline = Vec::with_capacity(s.sends.len());
    let mut per_link_windows: BTreeMap<(NpuId, NpuId), Vec<(f64, f64)>> = BTreeMap::new();

    // Sends are sorted by (depart, src, dst, chunk); per link this is exactly
    // the FIFO service order, and every delivery that can enable a send was
    // processed earlier (steps >= 1 forces the deliverer to depart earlier).
    for send in &s.sends {
        if send.steps == 0 {
            return Err(Error::InvalidInput(
                "corrupt schedule: zero-step send".into(),
            ));
        }
        let link = topology.link(send.src, send.dst).ok_or_else(|| {
            Error::InvalidInput(format!(
                "schedule uses nonexistent link {}->{}",
                send.src, send.dst
            ))
        })?;
        let ready = deliveries
            .get(&(send.chunk, send.src))
            .map(|v| {
                v.iter()
                    .filter(|&&(at, _)| at <= send.depart)
                    .map(|&(_, end)| end)
                    .fold(f64::INFINITY, f64::min)
            })
            .filter(|end| end.is_finite())
            .unwrap_or(0.0);
        let key = (send.src, send.dst);
        let free = link_free.get(&key).copied().unwrap_or(0.0);
        let start = ready.max(free);
        let duration = link.delay_us(chunk_size);
        let end = start + duration;
        link_free.insert(key, end);
        *link_busy.entry(key).or_insert(0.0) += duration;
        deliveries
            .entry((send.chunk, send.dst))
            .or_default()
            .push((send.arrive(), end));
        per_link_windows.entry(key).or_default().push((ready, end));
        timeline.push(SendTiming {
            send: *send,
            start_us: start,
            end_us: end,
        });
    }

    let collective_time_us = timeline.iter().map(|t| t.end_us).fold(0.0, f64::max);
    let per_link_utilization = link_busy
        .iter()
        .map(|(&k, &busy)| {
            let frac = if collective_time_us > 0.0 {
                busy / collective_time_us
            } else {
                0.0
            };
            (k, frac)
        })
        .collect();

    // Peak queue depth per link: sends wait from ready until service end.
    let mut max_congestion = 0usize;
    for windows in per_link_windows.values() {
        let mut events: Vec<(f64, i32)> = Vec::with_capacity(windows.len() * 2);
        for &(ready, end) in windows {
            events.push((ready, 1));
            events.push((end, -1));
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut depth = 0i32;
        for (_, delta) in events {
            depth += delta;
            max_congestion = max_congestion.max(depth as usize);
        }
    }

    Ok(CostReport {
        collective_time_us,
        per_link_utilization,
        max_congestion,
        timeline,
    })
}

fn derive_shards(collective: &Collective, num_npus: usize) -> Result<(usize, u64)> {
    let total = collective.chunks.len();
    if total % num_npus != 0 {
        return Err(Error::InvalidSpec(format!(
            "collective has {total} chunks, not a multiple of {num_npus} NPUs"
        )));
    }
    Ok((total / num_npus, collective.chunk_size()))
}

/// Logical-ring baseline in NPU id order. Each logical hop i -> i+1 expands
/// to per-link sends along a shortest physical path; All-Reduce runs the
/// reduce-scatter rotation followed by the all-gather rotation.
pub fn baseline_ring(topology: &Topology, collective: &Collective) -> Result<Schedule> {
    let n = topology.num_npus;
    if !matches!(
        collective.kind,
        CollectiveKind::AllGather | CollectiveKind::ReduceScatter | CollectiveKind::AllReduce
    ) {
        return Err(Error::InvalidSpec(format!(
            "ring baseline does not support {}",
            collective.kind.name()
        )));
    }
    let (k, chunk_size) = derive_shards(collective, n)?;
    let dt = discretize(topology, chunk_size, None)?;
    let sp = all_pairs_shortest_paths(&dt);

    // Expand each logical hop once; the slowest hop sets the step length.
    let mut hop_paths = Vec::with_capacity(n);
    let mut hop_len = 0usize;
    for m in 0..n {
        let next = (m + 1) % n;
        let path = sp
            .path(m, next)
            .ok_or(Error::UnreachableDestination { chunk: 0, npu: next })?;
        let total: usize = path
            .windows(2)
            .map(|w| dt.steps(w[0], w[1]).expect("path follows edges"))
            .sum();
        hop_len = hop_len.max(total);
        hop_paths.push(path);
    }
    let step_len = hop_len * k;

    // One rotation phase: at logical step t, NPU m forwards the shard set of
    // owner (m - t) mod n to its successor.
    let rotation = |base: usize, sends: &mut Vec<Send>| {
        for t in 0..n - 1 {
            for m in 0..n {
                let owner = (m + n - t % n) % n;
                for j in 0..k {
                    let chunk = owner * k + j;
                    let mut at = base + t * step_len + j * hop_len;
                    let path = &hop_paths[m];
                    for w in path.windows(2) {
                        let steps = dt.steps(w[0], w[1]).unwrap();
                        sends.push(Send {
                            chunk,
                            src: w[0],
                            dst: w[1],
                            depart: at,
                            steps,
                        });
                        at += steps;
                    }
                }
            }
        }
    };

    let mut sends = Vec::new();
    let phase_len = (n - 1) * step_len;
    let mut phase_split = None;
    match collective.kind {
        CollectiveKind::AllGather | CollectiveKind::ReduceScatter => rotation(0, &mut sends),
        CollectiveKind::AllReduce => {
            rotation(0, &mut sends);
            rotation(phase_len, &mut sends);
            phase_split = Some(phase_len);
        }
        _ => unreachable!(),
    }
    let mut provenance = Provenance::new("baseline-ring", 0, "baseline");
    provenance.phase_split = phase_split;
    Ok(Schedule::new(
        &topology.name,
        dt.factor_us,
        chunk_size,
        sends,
        provenance,
    ))
}

fn route(topology: &Topology, sp: &ShortestPaths, src: NpuId, dst: NpuId) -> Option<Vec<NpuId>> {
    if let Some((rows, cols)) = topology.grid {
        // xy-routing: walk the column dimension first, then the row.
        let _ = rows;
        let (r1, c1) = (src / cols, src % cols);
        let (r2, c2) = (dst / cols, dst % cols);
        let mut path = vec![src];
        let mut c = c1;
        while c != c2 {
            c = if c < c2 { c + 1 } else { c - 1 };
            path.push(r1 * cols + c);
        }
        let mut r = r1;
        while r != r2 {
            r = if r < r2 { r + 1 } else { r - 1 };
            path.push(r * cols + c2);
        }
        return Some(path);
    }
    sp.path(src, dst)
}

/// Direct baseline: every needed chunk travels straight from its source to
/// each destination along a shortest path (xy-routes on meshes), all starting
/// as early as possible. Congestion is left to the evaluator.
pub fn baseline_direct(topology: &Topology, collective: &Collective) -> Result<Schedule> {
    let chunk_size = collective.chunk_size();
    let dt = discretize(topology, chunk_size, None)?;
    let sp = all_pairs_shortest_paths(&dt);

    let path_sends = |chunk: usize, path: &[NpuId], start: usize, sends: &mut Vec<Send>| -> usize {
        let mut at = start;
        for w in path.windows(2) {
            let steps = dt.steps(w[0], w[1]).expect("path follows edges");
            sends.push(Send {
                chunk,
                src: w[0],
                dst: w[1],
                depart: at,
                steps,
            });
            at += steps;
        }
        at
    };

    let mut sends = Vec::new();
    let mut provenance = Provenance::new("baseline-direct", 0, "baseline");
    match collective.kind {
        CollectiveKind::AllReduce => {
            let n = topology.num_npus;
            let (k, _) = derive_shards(collective, n)?;
            // Phase 1: all partials of shard (i, j) converge on owner i.
            let mut barrier = 0usize;
            for owner in 0..n {
                for j in 0..k {
                    let chunk = owner * k + j;
                    for src in 0..n {
                        if src == owner {
                            continue;
                        }
                        let path = route(topology, &sp, src, owner).ok_or(
                            Error::UnreachableDestination { chunk, npu: owner },
                        )?;
                        let end = path_sends(chunk, &path, 0, &mut sends);
                        barrier = barrier.max(end);
                    }
                }
            }
            // Phase 2: reduced shards broadcast back after a global barrier.
            for owner in 0..n {
                for j in 0..k {
                    let chunk = owner * k + j;
                    for dst in 0..n {
                        if dst == owner {
                            continue;
                        }
                        let path = route(topology, &sp, owner, dst).ok_or(
                            Error::UnreachableDestination { chunk, npu: dst },
                        )?;
                        path_sends(chunk, &path, barrier, &mut sends);
                    }
                }
            }
            provenance.phase_split = Some(barrier);
        }
        CollectiveKind::Reduce | CollectiveKind::ReduceScatter => {
            // Mirror of the direct counterpart on the reversed topology.
            let counterpart = crate::collective::combining_counterpart(collective)?;
            let rev = topology.reversed();
            let s = baseline_direct(&rev, &counterpart)?;
            let mut inv = crate::schedule::invert_raw(&s);
            inv.topology_name = topology.name.clone();
            inv.provenance = Provenance::new("baseline-direct", 0, "baseline");
            return Ok(inv);
        }
        _ => {
            // Non-combining delivery: serve every unmet postcondition pair
            // from its nearest holder.
            for &(chunk, npu) in &collective.postcondition {
                if collective.precondition.contains(&(chunk, npu)) {
                    continue;
                }
                let holder = collective
                    .holders(chunk)
                    .filter(|&h| sp.reachable(h, npu))
                    .min_by_key(|&h| (sp.dist(h, npu), h))
                    .ok_or(Error::UnreachableDestination { chunk, npu })?;
                let path = route(topology, &sp, holder, npu)
                    .ok_or(Error::UnreachableDestination { chunk, npu })?;
                path_sends(chunk, &path, 0, &mut sends);
            }
        }
    }
    Ok(Schedule::new(
        &topology.name,
        dt.factor_us,
        chunk_size,
        sends,
        provenance,
    ))
}
