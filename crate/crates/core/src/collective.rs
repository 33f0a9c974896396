//! Collective communication patterns as precondition/postcondition sets of
//! (chunk, NPU) placements.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::NpuId;

pub type ChunkId = usize;

/// The basic scheduling unit; one chunk occupies one link slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: ChunkId,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CollectiveKind {
    Scatter,
    Gather,
    Broadcast,
    Reduce,
    ReduceScatter,
    AllGather,
    AllReduce,
    AllToAll,
    Custom,
}

impl CollectiveKind {
    pub fn is_combining(self) -> bool {
        matches!(
            self,
            CollectiveKind::Reduce | CollectiveKind::ReduceScatter | CollectiveKind::AllReduce
        )
    }

    pub fn needs_root(self) -> bool {
        matches!(
            self,
            CollectiveKind::Scatter
                | CollectiveKind::Gather
                | CollectiveKind::Broadcast
                | CollectiveKind::Reduce
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::Scatter => "scatter",
            CollectiveKind::Gather => "gather",
            CollectiveKind::Broadcast => "broadcast",
            CollectiveKind::Reduce => "reduce",
            CollectiveKind::ReduceScatter => "reduce-scatter",
            CollectiveKind::AllGather => "all-gather",
            CollectiveKind::AllReduce => "all-reduce",
            CollectiveKind::AllToAll => "all-to-all",
            CollectiveKind::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "scatter" => CollectiveKind::Scatter,
            "gather" => CollectiveKind::Gather,
            "broadcast" => CollectiveKind::Broadcast,
            "reduce" => CollectiveKind::Reduce,
            "reduce-scatter" | "reducescatter" => CollectiveKind::ReduceScatter,
            "all-gather" | "allgather" => CollectiveKind::AllGather,
            "all-reduce" | "allreduce" => CollectiveKind::AllReduce,
            "all-to-all" | "alltoall" => CollectiveKind::AllToAll,
            "custom" => CollectiveKind::Custom,
            other => return Err(Error::InvalidSpec(format!("unknown collective kind {other:?}"))),
        })
    }
}

/// A collective, defined by where each chunk starts and where it must end.
/// Combining collectives (Reduce, Reduce-Scatter, All-Reduce) are handled
/// structurally by inverting their non-combining counterparts; no reduction
/// arithmetic is modeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Collective {
    pub kind: CollectiveKind,
    pub chunks: Vec<Chunk>,
    pub precondition: BTreeSet<(ChunkId, NpuId)>,
    pub postcondition: BTreeSet<(ChunkId, NpuId)>,
    pub combining: bool,
    pub root: Option<NpuId>,
}

impl Collective {
    /// Validates the cross-field invariants. Multi-source chunks are allowed
    /// only for Custom collectives (merged workloads) and combining kinds.
    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<ChunkId> = self.chunks.iter().map(|c| c.id).collect();
        if ids.len() != self.chunks.len() {
            return Err(Error::InvalidSpec("duplicate chunk ids".into()));
        }
        if self.chunks.iter().any(|c| c.size_bytes == 0) {
            return Err(Error::InvalidSpec("chunk size must be > 0".into()));
        }
        for &(c, _) in self.precondition.iter().chain(self.postcondition.iter()) {
            if !ids.contains(&c) {
                return Err(Error::InvalidSpec(format!("placement references unknown chunk {c}")));
            }
        }
        let pre_chunks: BTreeSet<ChunkId> = self.precondition.iter().map(|&(c, _)| c).collect();
        for &(c, _) in &self.postcondition {
            if !pre_chunks.contains(&c) {
                return Err(Error::InvalidSpec(format!(
                    "chunk {c} appears in postcondition but nowhere in precondition"
                )));
            }
        }
        if self.combining != self.kind.is_combining() {
            return Err(Error::InvalidSpec(format!(
                "combining flag must be {} for {}",
                self.kind.is_combining(),
                self.kind.name()
            )));
        }
        if !self.combining && self.kind != CollectiveKind::Custom {
            let mut sources: BTreeMap<ChunkId, usize> = BTreeMap::new();
            for &(c, _) in &self.precondition {
                *sources.entry(c).or_insert(0) += 1;
            }
            if sources.values().any(|&n| n != 1) {
                return Err(Error::InvalidSpec(
                    "non-combining built-in collectives need exactly one source per chunk".into(),
                ));
            }
        }
        Ok(())
    }

    /// NPUs that hold `chunk` in the precondition.
    pub fn holders(&self, chunk: ChunkId) -> impl Iterator<Item = NpuId> + '_ {
        self.precondition
            .range((chunk, 0)..=(chunk, usize::MAX))
            .map(|&(_, n)| n)
    }

    pub fn chunk_size(&self) -> u64 {
        self.chunks.first().map(|c| c.size_bytes).unwrap_or(0)
    }

    pub fn max_npu(&self) -> Option<NpuId> {
        self.precondition
            .iter()
            .chain(self.postcondition.iter())
            .map(|&(_, n)| n)
            .max()
    }
}

/// Builds the standard placements for a built-in collective.
///
/// Chunk layout: rooted collectives with k chunks per NPU number chunk
/// `i * k + j` as slot j of NPU i; All-to-All numbers chunk
/// `(i * n + j) * k + m` as the m-th chunk from source i to destination j.
pub fn make_collective(
    kind: CollectiveKind,
    num_npus: usize,
    chunks_per_npu: usize,
    chunk_size: u64,
    root: Option<NpuId>,
) -> Result<Collective> {
    if num_npus < 2 {
        return Err(Error::InvalidSize(format!("collective needs >= 2 NPUs, got {num_npus}")));
    }
    if chunks_per_npu < 1 {
        return Err(Error::InvalidSize("chunks_per_npu must be >= 1".into()));
    }
    if chunk_size == 0 {
        return Err(Error::InvalidSize("chunk_size must be > 0".into()));
    }
    let root = if kind.needs_root() {
        match root {
            Some(r) if r < num_npus => Some(r),
            Some(r) => {
                return Err(Error::InvalidSpec(format!("root {r} out of range")));
            }
            None => {
                return Err(Error::InvalidSpec(format!("{} requires a root", kind.name())));
            }
        }
    } else {
        None
    };
    let n = num_npus;
    let k = chunks_per_npu;
    let chunk = |i: usize| Chunk { id: i, size_bytes: chunk_size };
    let mut pre = BTreeSet::new();
    let mut post = BTreeSet::new();
    let chunks: Vec<Chunk>;
    match kind {
        CollectiveKind::Scatter => {
            let r = root.unwrap();
            chunks = (0..n * k).map(chunk).collect();
            for i in 0..n {
                for j in 0..k {
                    pre.insert((i * k + j, r));
                    post.insert((i * k + j, i));
                }
            }
        }
        CollectiveKind::Gather => {
            let r = root.unwrap();
            chunks = (0..n * k).map(chunk).collect();
            for i in 0..n {
                for j in 0..k {
                    pre.insert((i * k + j, i));
                    post.insert((i * k + j, r));
                }
            }
        }
        CollectiveKind::Broadcast => {
            let r = root.unwrap();
            chunks = (0..k).map(chunk).collect();
            for c in 0..k {
                pre.insert((c, r));
                for i in 0..n {
                    post.insert((c, i));
                }
            }
        }
        CollectiveKind::Reduce => {
            // Dual of Broadcast: every NPU holds a partial of each chunk and
            // all partials converge on the root.
            let r = root.unwrap();
            chunks = (0..k).map(chunk).collect();
            for c in 0..k {
                for i in 0..n {
                    pre.insert((c, i));
                }
                post.insert((c, r));
            }
        }
        CollectiveKind::AllGather => {
            chunks = (0..n * k).map(chunk).collect();
            for i in 0..n {
                for j in 0..k {
                    pre.insert((i * k + j, i));
                    for d in 0..n {
                        post.insert((i * k + j, d));
                    }
                }
            }
        }
        CollectiveKind::ReduceScatter => {
            // Dual of All-Gather.
            chunks = (0..n * k).map(chunk).collect();
            for i in 0..n {
                for j in 0..k {
                    for s in 0..n {
                        pre.insert((i * k + j, s));
                    }
                    post.insert((i * k + j, i));
                }
            }
        }
        CollectiveKind::AllReduce => {
            // Defined by its Reduce-Scatter + All-Gather decomposition: chunk
            // i*k+j is the reduced shard owned by NPU i; every NPU starts with
            // a partial of every shard and ends with every reduced shard.
            chunks = (0..n * k).map(chunk).collect();
            for c in 0..n * k {
                for i in 0..n {
                    pre.insert((c, i));
                    post.insert((c, i));
                }
            }
        }
        CollectiveKind::AllToAll => {
            chunks = (0..n * n * k).map(chunk).collect();
            for i in 0..n {
                for j in 0..n {
                    for m in 0..k {
                        let c = (i * n + j) * k + m;
                        pre.insert((c, i));
                        post.insert((c, j));
                    }
                }
            }
        }
        CollectiveKind::Custom => {
            return Err(Error::InvalidSpec(
                "custom collectives are built from explicit placements or JSON".into(),
            ));
        }
    }
    let collective = Collective {
        kind,
        chunks,
        precondition: pre,
        postcondition: post,
        combining: kind.is_combining(),
        root,
    };
    collective.validate()?;
    Ok(collective)
}

/// The non-combining dual whose inverted schedule realizes a combining
/// collective: Reduce -> Broadcast (same root), Reduce-Scatter -> All-Gather.
/// All-Reduce has no single dual; it is composed from its two phases.
pub fn combining_counterpart(c: &Collective) -> Result<Collective> {
    if !c.combining {
        return Err(Error::InvalidInput(
            "combining_counterpart requires a combining collective".into(),
        ));
    }
    let kind = match c.kind {
        CollectiveKind::Reduce => CollectiveKind::Broadcast,
        CollectiveKind::ReduceScatter => CollectiveKind::AllGather,
        CollectiveKind::AllReduce => {
            return Err(Error::InvalidInput(
                "all-reduce has no single dual: compose reduce-scatter and all-gather".into(),
            ));
        }
        _ => unreachable!("combining flag is validated against the kind"),
    };
    let counterpart = Collective {
        kind,
        chunks: c.chunks.clone(),
        precondition: c.postcondition.clone(),
        postcondition: c.precondition.clone(),
        combining: false,
        root: c.root,
    };
    counterpart.validate()?;
    Ok(counterpart)
}

/// One tenant of a merged collective: the collective plus the global NPU id
/// for each of its local NPU ids.
#[derive(Debug, Clone)]
pub struct TenantPlacement {
    pub collective: Collective,
    /// `npu_map[local] = global`.
    pub npu_map: Vec<NpuId>,
}

/// Union of several collectives running concurrently on disjoint chunk
/// namespaces. Chunk ids are renumbered per tenant; placements are remapped
/// through each tenant's NPU map. The result is a Custom, non-combining
/// delivery problem (reduction semantics are out of scope, so a combining
/// member contributes its placements as a multi-source union).
pub fn merge_collectives(tenants: &[TenantPlacement]) -> Result<Collective> {
    if tenants.is_empty() {
        return Err(Error::InvalidSpec("merge needs at least one collective".into()));
    }
    let mut chunks = Vec::new();
    let mut pre = BTreeSet::new();
    let mut post = BTreeSet::new();
    let mut offset = 0usize;
    for (idx, tenant) in tenants.iter().enumerate() {
        tenant.collective.validate()?;
        let local_npus = tenant.npu_map.len();
        if let Some(max) = tenant.collective.max_npu() {
            if max >= local_npus {
                return Err(Error::InvalidSpec(format!(
                    "tenant {idx} references NPU {max} but its map has {local_npus} entries"
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for &g in &tenant.npu_map {
            if !seen.insert(g) {
                return Err(Error::InvalidSpec(format!(
                    "tenant {idx} maps two local NPUs to global NPU {g}"
                )));
            }
        }
        let remap_chunk: BTreeMap<ChunkId, ChunkId> = tenant
            .collective
            .chunks
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id, offset + i))
            .collect();
        for c in &tenant.collective.chunks {
            chunks.push(Chunk {
                id: remap_chunk[&c.id],
                size_bytes: c.size_bytes,
            });
        }
        for &(c, n) in &tenant.collective.precondition {
            pre.insert((remap_chunk[&c], tenant.npu_map[n]));
        }
        for &(c, n) in &tenant.collective.postcondition {
            post.insert((remap_chunk[&c], tenant.npu_map[n]));
        }
        offset += tenant.collective.chunks.len();
    }
    let merged = Collective {
        kind: CollectiveKind::Custom,
        chunks,
        precondition: pre,
        postcondition: post,
        combining: false,
        root: None,
    };
    merged.validate()?;
    Ok(merged)
}

#[derive(Serialize, Deserialize)]
struct CollectiveJson {
    kind: String,
    chunks: Vec<Chunk>,
    pre: Vec<(ChunkId, NpuId)>,
    post: Vec<(ChunkId, NpuId)>,
    combining: bool,
}

impl Collective {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CollectiveJson {
            kind: self.kind.name().to_string(),
            chunks: self.chunks.clone(),
            pre: self.precondition.iter().copied().collect(),
            post: self.postcondition.iter().copied().collect(),
            combining: self.combining,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Collective> {
        let parsed: CollectiveJson = serde_json::from_str(text)?;
        let kind = CollectiveKind::parse(&parsed.kind)?;
        // Re-derive the root for rooted kinds: the single pre NPU for
        // Scatter/Broadcast, the single post NPU for Gather/Reduce.
        let root = match kind {
            CollectiveKind::Scatter | CollectiveKind::Broadcast => {
                single_npu(parsed.pre.iter().map(|&(_, n)| n))
            }
            CollectiveKind::Gather | CollectiveKind::Reduce => {
                single_npu(parsed.post.iter().map(|&(_, n)| n))
            }
            _ => None,
        };
        let c = Collective {
            kind,
            chunks: parsed.chunks,
            precondition: parsed.pre.into_iter().collect(),
            postcondition: parsed.post.into_iter().collect(),
            combining: parsed.combining,
            root,
        };
        c.validate()?;
        Ok(c)
    }
}

fn single_npu(mut npus: impl Iterator<Item = NpuId>) -> Option<NpuId> {
    let first = npus.next()?;
    npus.all(|n| n == first).then_some(first)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SZ: u64 = 1 << 20;

    #[test]
    fn all_gather_placements() {
        let c = make_collective(CollectiveKind::AllGather, 3, 1, SZ, None).unwrap();
        let pre: Vec<_> = c.precondition.iter().copied().collect();
        assert_eq!(pre, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(c.postcondition.len(), 9);

        let c = make_collective(CollectiveKind::AllGather, 2, 1, SZ, None).unwrap();
        assert_eq!(c.postcondition.len(), 4);
    }

    #[test]
    fn scatter_placements() {
        let c = make_collective(CollectiveKind::Scatter, 4, 1, SZ, Some(0)).unwrap();
        assert!(c.precondition.iter().all(|&(_, n)| n == 0));
        assert_eq!(c.precondition.len(), 4);
        let post: Vec<_> = c.postcondition.iter().copied().collect();
        assert_eq!(post, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);

        assert!(matches!(
            make_collective(CollectiveKind::Scatter, 4, 1, SZ, None),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn postcondition_closed_forms() {
        for n in [2usize, 3, 5] {
            for k in [1usize, 2] {
                let ag = make_collective(CollectiveKind::AllGather, n, k, SZ, None).unwrap();
                assert_eq!(ag.postcondition.len(), n * n * k);
                let sc = make_collective(CollectiveKind::Scatter, n, k, SZ, Some(0)).unwrap();
                assert_eq!(sc.postcondition.len(), n * k);
                let bc = make_collective(CollectiveKind::Broadcast, n, k, SZ, Some(1 % n)).unwrap();
                assert_eq!(bc.postcondition.len(), n * k);
                let a2a = make_collective(CollectiveKind::AllToAll, n, k, SZ, None).unwrap();
                assert_eq!(a2a.postcondition.len(), n * n * k);
            }
        }
    }

    #[test]
    fn counterpart_is_the_dual() {
        let red = make_collective(CollectiveKind::Reduce, 4, 1, SZ, Some(2)).unwrap();
        let bc = combining_counterpart(&red).unwrap();
        assert_eq!(bc.kind, CollectiveKind::Broadcast);
        assert_eq!(bc.root, Some(2));
        assert_eq!(bc.precondition, red.postcondition);
        assert_eq!(bc.postcondition, red.precondition);

        let rs = make_collective(CollectiveKind::ReduceScatter, 4, 1, SZ, None).unwrap();
        let ag = combining_counterpart(&rs).unwrap();
        assert_eq!(ag.kind, CollectiveKind::AllGather);
        let direct = make_collective(CollectiveKind::AllGather, 4, 1, SZ, None).unwrap();
        assert_eq!(ag.precondition, direct.precondition);
        assert_eq!(ag.postcondition, direct.postcondition);

        let ar = make_collective(CollectiveKind::AllReduce, 4, 1, SZ, None).unwrap();
        assert!(combining_counterpart(&ar).is_err());
        assert!(combining_counterpart(&direct).is_err());
    }

    #[test]
    fn merging_tenants() {
        // Two all-gathers on disjoint halves of a 4-NPU system.
        let half = make_collective(CollectiveKind::AllGather, 2, 1, SZ, None).unwrap();
        let merged = merge_collectives(&[
            TenantPlacement { collective: half.clone(), npu_map: vec![0, 1] },
            TenantPlacement { collective: half.clone(), npu_map: vec![2, 3] },
        ])
        .unwrap();
        assert_eq!(merged.kind, CollectiveKind::Custom);
        assert_eq!(merged.chunks.len(), 4);
        let expect: BTreeSet<_> = [
            (0, 0), (0, 1), (1, 0), (1, 1),
            (2, 2), (2, 3), (3, 2), (3, 3),
        ]
        .into_iter()
        .collect();
        assert_eq!(merged.postcondition, expect);

        // Merging one collective keeps its placements.
        let single = merge_collectives(&[TenantPlacement {
            collective: half.clone(),
            npu_map: vec![0, 1],
        }])
        .unwrap();
        assert_eq!(single.precondition, half.precondition);
        assert_eq!(single.postcondition, half.postcondition);

        // Overlapping NPU maps within one tenant are rejected.
        assert!(merge_collectives(&[TenantPlacement {
            collective: half,
            npu_map: vec![1, 1],
        }])
        .is_err());
    }

    #[test]
    fn merge_is_associative_and_commutative_up_to_renaming() {
        let a = make_collective(CollectiveKind::Broadcast, 2, 1, SZ, Some(0)).unwrap();
        let b = make_collective(CollectiveKind::AllGather, 2, 1, SZ, None).unwrap();
        let c = make_collective(CollectiveKind::Gather, 2, 1, SZ, Some(1)).unwrap();
        let t = |col: &Collective, m: [usize; 2]| TenantPlacement {
            collective: col.clone(),
            npu_map: m.to_vec(),
        };
        let abc = merge_collectives(&[t(&a, [0, 1]), t(&b, [2, 3]), t(&c, [4, 5])]).unwrap();
        let ab = merge_collectives(&[t(&a, [0, 1]), t(&b, [2, 3])]).unwrap();
        let ab_c = merge_collectives(&[
            TenantPlacement { collective: ab, npu_map: (0..4).collect() },
            t(&c, [4, 5]),
        ])
        .unwrap();
        assert_eq!(abc.precondition, ab_c.precondition);
        assert_eq!(abc.postcondition, ab_c.postcondition);

        let cba = merge_collectives(&[t(&c, [4, 5]), t(&b, [2, 3]), t(&a, [0, 1])]).unwrap();
        // Same placements modulo the chunk renaming.
        assert_eq!(canonical(&abc), canonical(&cba));
    }

    fn canonical(c: &Collective) -> BTreeSet<(Vec<NpuId>, Vec<NpuId>)> {
        // A chunk's identity is its (sources, destinations) signature.
        c.chunks
            .iter()
            .map(|ch| {
                let srcs: Vec<_> = c.precondition.iter().filter(|&&(i, _)| i == ch.id).map(|&(_, n)| n).collect();
                let dsts: Vec<_> = c.postcondition.iter().filter(|&&(i, _)| i == ch.id).map(|&(_, n)| n).collect();
                (srcs, dsts)
            })
            .collect()
    }

    #[test]
    fn json_round_trip() {
        let c = make_collective(CollectiveKind::Reduce, 3, 2, SZ, Some(2)).unwrap();
        let text = c.to_json().unwrap();
        let back = Collective::from_json(&text).unwrap();
        assert_eq!(back.kind, c.kind);
        assert_eq!(back.root, Some(2));
        assert_eq!(back.precondition, c.precondition);
        assert_eq!(back.postcondition, c.postcondition);

        assert!(Collective::from_json("{\"kind\": \"nope\"}").is_err());
    }
}
