//! The schedule intermediate representation: a set of timed chunk sends over
//! links, produced by every synthesizer and consumed by the verifier, the
//! evaluator, and the CLI.
//!
//! Link occupancy semantics, shared with both synthesizers: a send departing
//! at t on a k-step link occupies that link for [t, t+k) and no other send
//! may depart it in that window.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::collective::{make_collective, Collective, CollectiveKind};
use crate::error::{Error, Result};
use crate::topology::{discretize, NpuId, Topology};

pub const SCHEDULE_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Send {
    pub chunk: usize,
    pub src: NpuId,
    pub dst: NpuId,
    #[serde(rename = "t")]
    pub depart: usize,
    pub steps: usize,
}

impl Send {
    pub fn arrive(&self) -> usize {
        self.depart + self.steps
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub synthesizer: String,
    pub seed: u64,
    pub config_digest: String,
    /// For composed all-reduce schedules: the timestep where the
    /// reduce-scatter phase ends and the all-gather phase begins.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase_split: Option<usize>,
    /// False when a time limit forced an unproven result.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimal_steps: Option<bool>,
}

impl Provenance {
    pub fn new(synthesizer: impl Into<String>, seed: u64, config_digest: impl Into<String>) -> Self {
        Provenance {
            synthesizer: synthesizer.into(),
            seed,
            config_digest: config_digest.into(),
            phase_split: None,
            optimal_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub topology_name: String,
    /// Microseconds per discretized timestep.
    pub factor_us: f64,
    pub chunk_bytes: u64,
    pub horizon: usize,
    /// Sorted by (depart, src, dst, chunk) for reproducibility.
    pub sends: Vec<Send>,
    pub provenance: Provenance,
}

impl Schedule {
    pub fn new(
        topology_name: impl Into<String>,
        factor_us: f64,
        chunk_bytes: u64,
        mut sends: Vec<Send>,
        provenance: Provenance,
    ) -> Self {
        sends.sort_by_key(|s| (s.depart, s.src, s.dst, s.chunk));
        let horizon = sends.iter().map(Send::arrive).max().unwrap_or(0);
        Schedule {
            topology_name: topology_name.into(),
            factor_us,
            chunk_bytes,
            horizon,
            sends,
            provenance,
        }
    }

    /// Earliest hold time of every (chunk, npu) reachable from the
    /// precondition through this schedule's sends. Precondition holds are at
    /// time 0; a delivered chunk is available from its arrival timestep.
    pub fn hold_times(&self, collective: &Collective) -> BTreeMap<(usize, NpuId), usize> {
        let mut holds: BTreeMap<(usize, NpuId), usize> = BTreeMap::new();
        for &(c, n) in &collective.precondition {
            holds.insert((c, n), 0);
        }
        for s in &self.sends {
            if let Some(&src_at) = holds.get(&(s.chunk, s.src)) {
                if src_at <= s.depart {
                    let entry = holds.entry((s.chunk, s.dst)).or_insert(usize::MAX);
                    *entry = (*entry).min(s.arrive());
                }
            }
        }
        holds
    }
}

/// Keeps only sends lying on a delivery chain of some postcondition pair:
/// the first send to land each needed (chunk, npu), plus transitively the
/// sends that made its source hold the chunk. Drops duplicate deliveries and
/// dead-end relays; never invalidates a verifier-clean schedule.
pub fn prune_to_postcondition(sends: &[Send], collective: &Collective) -> Vec<Send> {
    let mut sorted: Vec<(usize, Send)> = sends.iter().copied().enumerate().collect();
    sorted.sort_by_key(|&(_, s)| (s.depart, s.src, s.dst, s.chunk));
    // First delivery per (chunk, npu), replayed in departure order.
    let mut holds: BTreeMap<(usize, NpuId), usize> = BTreeMap::new();
    let mut deliverer: BTreeMap<(usize, NpuId), usize> = BTreeMap::new();
    for &(c, n) in &collective.precondition {
        holds.insert((c, n), 0);
    }
    for &(idx, s) in &sorted {
        let held = holds.get(&(s.chunk, s.src)).is_some_and(|&at| at <= s.depart);
        if !held {
            continue;
        }
        let key = (s.chunk, s.dst);
        let arrive = s.arrive();
        if holds.get(&key).is_none_or(|&at| arrive < at) {
            holds.insert(key, arrive);
            deliverer.insert(key, idx);
        }
    }
    let mut needed: Vec<(usize, NpuId)> = collective
        .postcondition
        .iter()
        .filter(|p| !collective.precondition.contains(p))
        .copied()
        .collect();
    let mut keep = std::collections::BTreeSet::new();
    while let Some(key) = needed.pop() {
        let Some(&idx) = deliverer.get(&key) else {
            continue; // unmet; the verifier reports it
        };
        if !keep.insert(idx) {
            continue;
        }
        let s = sends[idx];
        if !collective.precondition.contains(&(s.chunk, s.src)) {
            needed.push((s.chunk, s.src));
        }
    }
    sorted
        .into_iter()
        .filter(|&(idx, _)| keep.contains(&idx))
        .map(|(_, s)| s)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Send departs before its chunk is held (arrived) at the source.
    UnheldSend { send: Send },
    /// Two sends occupy the same link with overlapping [t, t+steps) windows.
    LinkOverlap { first: Send, second: Send },
    /// A postcondition pair never holds by the horizon.
    UnmetPostcondition { chunk: usize, npu: NpuId },
    /// Send uses a link absent from the topology (or with the wrong number
    /// of discretized steps).
    NonexistentLink { send: Send },
    /// An all-reduce schedule without its phase split cannot be checked.
    MissingPhaseSplit,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::UnheldSend { send } => write!(
                f,
                "chunk {} sent from {} at t={} before it arrived there",
                send.chunk, send.src, send.depart
            ),
            Violation::LinkOverlap { first, second } => write!(
                f,
                "link {}->{} carries chunk {} (t={}) and chunk {} (t={}) with overlapping occupancy",
                first.src, first.dst, first.chunk, first.depart, second.chunk, second.depart
            ),
            Violation::UnmetPostcondition { chunk, npu } => {
                write!(f, "chunk {chunk} never reaches NPU {npu}")
            }
            Violation::NonexistentLink { send } => write!(
                f,
                "send of chunk {} uses nonexistent link {}->{} ({} steps)",
                send.chunk, send.src, send.dst, send.steps
            ),
            Violation::MissingPhaseSplit => {
                write!(f, "all-reduce schedule lacks a phase split in its provenance")
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub violations: Vec<Violation>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Relaxed mode for congestion-blind schedules: overlapping link
    /// occupancy is not reported.
    pub ignore_congestion: bool,
}

/// Replays the schedule against the collective on the topology and reports
/// every violation found. Combining collectives are checked through their
/// structural mirror: the inverted schedule must realize the non-combining
/// counterpart on the reversed topology.
pub fn verify(s: &Schedule, topology: &Topology, collective: &Collective) -> VerifyReport {
    verify_with(s, topology, collective, VerifyOptions::default())
}

pub fn verify_with(
    s: &Schedule,
    topology: &Topology,
    collective: &Collective,
    opts: VerifyOptions,
) -> VerifyReport {
    match collective.kind {
        CollectiveKind::Reduce | CollectiveKind::ReduceScatter => {
            let counterpart = match crate::collective::combining_counterpart(collective) {
                Ok(c) => c,
                Err(_) => {
                    return VerifyReport {
                        violations: vec![Violation::MissingPhaseSplit],
                    }
                }
            };
            verify_with(&invert_raw(s), &topology.reversed(), &counterpart, opts)
        }
        CollectiveKind::AllReduce => verify_allreduce(s, topology, collective, opts),
        _ => verify_direct(s, topology, collective, opts),
    }
}

fn verify_allreduce(
    s: &Schedule,
    topology: &Topology,
    collective: &Collective,
    opts: VerifyOptions,
) -> VerifyReport {
    let Some(split) = s.provenance.phase_split else {
        return VerifyReport {
            violations: vec![Violation::MissingPhaseSplit],
        };
    };
    let Some(ag) = allreduce_gather_phase(collective) else {
        return VerifyReport {
            violations: vec![Violation::MissingPhaseSplit],
        };
    };
    let mut rs_sends = Vec::new();
    let mut ag_sends = Vec::new();
    for send in &s.sends {
        if send.depart < split {
            rs_sends.push(*send);
        } else {
            ag_sends.push(Send {
                depart: send.depart - split,
                ..*send
            });
        }
    }
    let mut rs = Schedule::new(
        s.topology_name.clone(),
        s.factor_us,
        s.chunk_bytes,
        rs_sends,
        s.provenance.clone(),
    );
    rs.horizon = split;
    let ag_phase = Schedule::new(
        s.topology_name.clone(),
        s.factor_us,
        s.chunk_bytes,
        ag_sends,
        s.provenance.clone(),
    );
    let mut report = verify_with(&invert_raw(&rs), &topology.reversed(), &ag, opts);
    report
        .violations
        .extend(verify_with(&ag_phase, topology, &ag, opts).violations);
    report
}

/// The all-gather instance underlying both phases of a standard all-reduce
/// collective (chunk i*k+j is the reduced shard owned by NPU i).
pub fn allreduce_gather_phase(collective: &Collective) -> Option<Collective> {
    if collective.kind != CollectiveKind::AllReduce {
        return None;
    }
    let npus: std::collections::BTreeSet<NpuId> =
        collective.precondition.iter().map(|&(_, n)| n).collect();
    let n = npus.len();
    if n < 2 || collective.chunks.len() % n != 0 {
        return None;
    }
    let k = collective.chunks.len() / n;
    make_collective(
        CollectiveKind::AllGather,
        n,
        k,
        collective.chunk_size(),
        None,
    )
    .ok()
}

fn verify_direct(
    s: &Schedule,
    topology: &Topology,
    collective: &Collective,
    opts: VerifyOptions,
) -> VerifyReport {
    let mut violations = Vec::new();
    let dt = match discretize(topology, s.chunk_bytes, Some(s.factor_us)) {
        Ok(dt) => dt,
        Err(_) => {
            return VerifyReport {
                violations: s
                    .sends
                    .iter()
                    .map(|&send| Violation::NonexistentLink { send })
                    .collect(),
            }
        }
    };

    // Layer-by-layer hold replay over sends sorted by departure.
    let mut holds: BTreeMap<(usize, NpuId), usize> = BTreeMap::new();
    for &(c, n) in &collective.precondition {
        holds.insert((c, n), 0);
    }
    let mut per_link: BTreeMap<(NpuId, NpuId), Vec<Send>> = BTreeMap::new();
    for send in &s.sends {
        match dt.steps(send.src, send.dst) {
            Some(k) if k == send.steps => {}
            _ => {
                violations.push(Violation::NonexistentLink { send: *send });
                continue;
            }
        }
        let held = holds
            .get(&(send.chunk, send.src))
            .is_some_and(|&at| at <= send.depart);
        if !held {
            violations.push(Violation::UnheldSend { send: *send });
            continue;
        }
        let entry = holds.entry((send.chunk, send.dst)).or_insert(usize::MAX);
        *entry = (*entry).min(send.arrive());
        per_link.entry((send.src, send.dst)).or_default().push(*send);
    }

    if !opts.ignore_congestion {
        for sends in per_link.values() {
            for pair in sends.windows(2) {
                // Sorted by depart: overlap iff the next departs before the
                // previous occupancy window ends.
                if pair[1].depart < pair[0].arrive() {
                    violations.push(Violation::LinkOverlap {
                        first: pair[0],
                        second: pair[1],
                    });
                }
            }
        }
    }

    for &(c, n) in &collective.postcondition {
        let ok = holds.get(&(c, n)).is_some_and(|&at| at <= s.horizon);
        if !ok {
            violations.push(Violation::UnmetPostcondition { chunk: c, npu: n });
        }
    }
    VerifyReport { violations }
}

/// Pure time mirror: Send(c, a, b, t, k) becomes Send(c, b, a, horizon-t-k, k).
/// The result lives on the reversed topology.
pub fn invert_raw(s: &Schedule) -> Schedule {
    let sends = s
        .sends
        .iter()
        .map(|send| Send {
            chunk: send.chunk,
            src: send.dst,
            dst: send.src,
            depart: s.horizon - send.arrive(),
            steps: send.steps,
        })
        .collect();
    let mut inv = Schedule::new(
        s.topology_name.clone(),
        s.factor_us,
        s.chunk_bytes,
        sends,
        s.provenance.clone(),
    );
    inv.horizon = s.horizon;
    inv
}

/// Inverts a verifier-clean schedule of a non-combining collective; the
/// result realizes the combining collective with the swapped pre/post sets,
/// on the reversed topology.
pub fn invert(s: &Schedule, topology: &Topology, collective: &Collective) -> Result<Schedule> {
    if collective.combining {
        return Err(Error::InvalidInput(
            "invert expects a schedule for a non-combining collective".into(),
        ));
    }
    let report = verify(s, topology, collective);
    if !report.is_ok() {
        return Err(Error::InvalidInput(format!(
            "schedule is not verifier-clean: {}",
            report.violations[0]
        )));
    }
    Ok(invert_raw(s))
}

/// Concatenates a reduce-scatter phase and an all-gather phase into one
/// all-reduce schedule; the all-gather is shifted by the reduce-scatter
/// horizon and the split is recorded for later verification.
pub fn compose_allreduce(rs: &Schedule, ag: &Schedule) -> Result<Schedule> {
    if rs.topology_name != ag.topology_name {
        return Err(Error::InvalidComposition(format!(
            "phases were synthesized on different topologies ({} vs {})",
            rs.topology_name, ag.topology_name
        )));
    }
    if (rs.factor_us - ag.factor_us).abs() > 1e-12 || rs.chunk_bytes != ag.chunk_bytes {
        return Err(Error::InvalidComposition(
            "phases disagree on chunk size or discretization factor".into(),
        ));
    }
    let mut sends = rs.sends.clone();
    sends.extend(ag.sends.iter().map(|s| Send {
        depart: s.depart + rs.horizon,
        ..*s
    }));
    let mut provenance = rs.provenance.clone();
    provenance.phase_split = Some(rs.horizon);
    let mut out = Schedule::new(
        rs.topology_name.clone(),
        rs.factor_us,
        rs.chunk_bytes,
        sends,
        provenance,
    );
    out.horizon = rs.horizon + ag.horizon;
    Ok(out)
}

#[derive(Serialize)]
struct ScheduleJson<'a> {
    version: u64,
    topology: &'a str,
    factor_us: f64,
    chunk_bytes: u64,
    horizon: usize,
    sends: &'a [Send],
    provenance: &'a Provenance,
}

impl Schedule {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ScheduleJson {
            version: SCHEDULE_VERSION,
            topology: &self.topology_name,
            factor_us: self.factor_us,
            chunk_bytes: self.chunk_bytes,
            horizon: self.horizon,
            sends: &self.sends,
            provenance: &self.provenance,
        })?)
    }

    /// Parses and validates the schedule schema, reporting the JSON pointer
    /// of the first offending element.
    pub fn from_json(text: &str) -> Result<Schedule> {
        let value: Value = serde_json::from_str(text)?;
        let obj = value
            .as_object()
            .ok_or_else(|| schema_err("", "expected an object"))?;
        let version = require_u64(obj, "version", "")?;
        if version != SCHEDULE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let topology = require_str(obj, "topology", "")?.to_string();
        let factor_us = require_f64(obj, "factor_us", "")?;
        if factor_us <= 0.0 {
            return Err(schema_err("/factor_us", "must be positive"));
        }
        let chunk_bytes = require_u64(obj, "chunk_bytes", "")?;
        let horizon = require_u64(obj, "horizon", "")? as usize;
        let sends_val = obj
            .get("sends")
            .ok_or_else(|| schema_err("/sends", "missing field"))?;
        let sends_arr = sends_val
            .as_array()
            .ok_or_else(|| schema_err("/sends", "expected an array"))?;
        let mut sends = Vec::with_capacity(sends_arr.len());
        for (i, item) in sends_arr.iter().enumerate() {
            let ptr = format!("/sends/{i}");
            let send_obj = item
                .as_object()
                .ok_or_else(|| schema_err(&ptr, "expected an object"))?;
            let send = Send {
                chunk: require_u64(send_obj, "chunk", &ptr)? as usize,
                src: require_u64(send_obj, "src", &ptr)? as usize,
                dst: require_u64(send_obj, "dst", &ptr)? as usize,
                depart: require_u64(send_obj, "t", &ptr)? as usize,
                steps: require_u64(send_obj, "steps", &ptr)? as usize,
            };
            if send.steps == 0 {
                return Err(schema_err(&format!("{ptr}/steps"), "must be >= 1"));
            }
            if send.src == send.dst {
                return Err(schema_err(&format!("{ptr}/dst"), "src and dst must differ"));
            }
            if send.arrive() > horizon {
                return Err(schema_err(&ptr, "send arrives beyond the horizon"));
            }
            sends.push(send);
        }
        let prov_val = obj
            .get("provenance")
            .ok_or_else(|| schema_err("/provenance", "missing field"))?;
        let prov_obj = prov_val
            .as_object()
            .ok_or_else(|| schema_err("/provenance", "expected an object"))?;
        let provenance = Provenance {
            synthesizer: require_str(prov_obj, "synthesizer", "/provenance")?.to_string(),
            seed: require_u64(prov_obj, "seed", "/provenance")?,
            config_digest: require_str(prov_obj, "config_digest", "/provenance")?.to_string(),
            phase_split: match prov_obj.get("phase_split") {
                None | Some(Value::Null) => None,
                Some(v) => Some(
                    v.as_u64()
                        .ok_or_else(|| schema_err("/provenance/phase_split", "expected an integer"))?
                        as usize,
                ),
            },
            optimal_steps: match prov_obj.get("optimal_steps") {
                None | Some(Value::Null) => None,
                Some(v) => Some(
                    v.as_bool()
                        .ok_or_else(|| schema_err("/provenance/optimal_steps", "expected a bool"))?,
                ),
            },
        };
        let mut s = Schedule::new(topology, factor_us, chunk_bytes, sends, provenance);
        s.horizon = horizon;
        Ok(s)
    }
}

fn schema_err(pointer: &str, message: &str) -> Error {
    Error::Schema {
        pointer: pointer.to_string(),
        message: message.to_string(),
    }
}

fn require_u64(obj: &serde_json::Map<String, Value>, key: &str, base: &str) -> Result<u64> {
    obj.get(key)
        .ok_or_else(|| schema_err(&format!("{base}/{key}"), "missing field"))?
        .as_u64()
        .ok_or_else(|| schema_err(&format!("{base}/{key}"), "expected a nonnegative integer"))
}

fn require_f64(obj: &serde_json::Map<String, Value>, key: &str, base: &str) -> Result<f64> {
    obj.get(key)
        .ok_or_else(|| schema_err(&format!("{base}/{key}"), "missing field"))?
        .as_f64()
        .ok_or_else(|| schema_err(&format!("{base}/{key}"), "expected a number"))
}

fn require_str<'a>(
    obj: &'a serde_json::Map<String, Value>,
    key: &str,
    base: &str,
) -> Result<&'a str> {
    obj.get(key)
        .ok_or_else(|| schema_err(&format!("{base}/{key}"), "missing field"))?
        .as_str()
        .ok_or_else(|| schema_err(&format!("{base}/{key}"), "expected a string"))
}
