//! Combining-aware synthesis dispatch. Non-combining collectives are
//! synthesized directly; Reduce and Reduce-Scatter are synthesized as their
//! non-combining counterpart on the reversed topology and inverted back onto
//! the real links; All-Reduce composes an inverted all-gather (the
//! reduce-scatter phase) with a forward all-gather.

use crate::collective::{combining_counterpart, Collective, CollectiveKind};
use crate::error::{Error, Result};
use crate::greedy;
use crate::ilp::{self, SynthesisConfig};
use crate::schedule::{allreduce_gather_phase, compose_allreduce, invert_raw, Schedule};
use crate::topology::Topology;

#[derive(Debug, Clone)]
pub enum Synthesizer {
    Ilp(SynthesisConfig),
    Clustered(SynthesisConfig),
    Greedy { runs: usize, seed: u64 },
}

impl Synthesizer {
    pub fn name(&self) -> &'static str {
        match self {
            Synthesizer::Ilp(c) if c.taccl_like => "taccl-like",
            Synthesizer::Ilp(_) => "ilp",
            Synthesizer::Clustered(_) => "clustered",
            Synthesizer::Greedy { .. } => "greedy",
        }
    }
}

fn synthesize_noncombining(
    topology: &Topology,
    collective: &Collective,
    chunk_size: u64,
    method: &Synthesizer,
) -> Result<Schedule> {
    match method {
        Synthesizer::Ilp(config) => {
            ilp::synthesize_noncombining(topology, collective, chunk_size, config)
        }
        Synthesizer::Clustered(config) => {
            ilp::synthesize_clustered_noncombining(topology, collective, chunk_size, config)
        }
        Synthesizer::Greedy { runs, seed } => {
            greedy::best_of_k(topology, collective, chunk_size, *runs, *seed)
        }
    }
}

/// Synthesizes any collective, handling combining kinds structurally.
pub fn synthesize(
    topology: &Topology,
    collective: &Collective,
    chunk_size: u64,
    method: &Synthesizer,
) -> Result<Schedule> {
    collective.validate()?;
    match collective.kind {
        CollectiveKind::Reduce | CollectiveKind::ReduceScatter => {
            let counterpart = combining_counterpart(collective)?;
            let reversed = topology.reversed();
            let forward = synthesize_noncombining(&reversed, &counterpart, chunk_size, method)?;
            let mut inverted = invert_raw(&forward);
            inverted.topology_name = topology.name.clone();
            Ok(inverted)
        }
        CollectiveKind::AllReduce => {
            let ag = allreduce_gather_phase(collective).ok_or_else(|| {
                Error::InvalidSpec(
                    "all-reduce collective does not match the standard shard layout".into(),
                )
            })?;
            // The time budget covers the whole synthesis; each phase gets half.
            let phase_method = match method {
                Synthesizer::Ilp(c) => {
                    let mut c = c.clone();
                    c.time_limit /= 2;
                    Synthesizer::Ilp(c)
                }
                Synthesizer::Clustered(c) => {
                    let mut c = c.clone();
                    c.time_limit /= 2;
                    Synthesizer::Clustered(c)
                }
                g => g.clone(),
            };
            let reversed = topology.reversed();
            let rs_forward = synthesize_noncombining(&reversed, &ag, chunk_size, &phase_method)?;
            let mut rs = invert_raw(&rs_forward);
            rs.topology_name = topology.name.clone();
            let ag_schedule = synthesize_noncombining(topology, &ag, chunk_size, &phase_method)?;
            compose_allreduce(&rs, &ag_schedule)
        }
        _ => synthesize_noncombining(topology, collective, chunk_size, method),
    }
}
