//! Network topologies under the alpha-beta link cost model, plus
//! discretization into integral timesteps.
//!
//! A link sending `n` bytes costs `alpha + beta * n` microseconds. Builders
//! accept bandwidth in GB/s and convert to `beta` in us/byte internally
//! (1 GB/s == 1000 bytes/us).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NpuId = usize;

/// Convert a bandwidth in GB/s to beta in microseconds per byte.
pub fn beta_from_gbps(bw_gbps: f64) -> f64 {
    1.0 / (bw_gbps * 1000.0)
}

/// Convert beta (us/byte) back to GB/s.
pub fn gbps_from_beta(beta: f64) -> f64 {
    1.0 / (beta * 1000.0)
}

/// A directed link with alpha-beta cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub src: NpuId,
    pub dst: NpuId,
    /// Latency in microseconds, paid once per transmission.
    pub alpha_us: f64,
    /// Inverse bandwidth in microseconds per byte.
    pub beta_us_per_byte: f64,
}

impl Link {
    /// Continuous delay of sending `bytes` over this link.
    pub fn delay_us(&self, bytes: u64) -> f64 {
        self.alpha_us + self.beta_us_per_byte * bytes as f64
    }
}

/// A directed graph of NPUs. NPU ids are `0..num_npus`; self-loops are
/// rejected and at most one link exists per ordered pair.
#[derive(Debug, Clone)]
pub struct Topology {
    pub name: String,
    pub num_npus: usize,
    links: BTreeMap<(NpuId, NpuId), Link>,
    /// Set by `build_mesh` so routing-sensitive consumers (the Direct
    /// baseline's xy-routing) know the grid shape. Cleared by any mutation
    /// that invalidates it.
    pub grid: Option<(usize, usize)>,
}

impl Topology {
    pub fn new(name: impl Into<String>, num_npus: usize) -> Self {
        Topology {
            name: name.into(),
            num_npus,
            links: BTreeMap::new(),
            grid: None,
        }
    }

    pub fn add_link(&mut self, src: NpuId, dst: NpuId, alpha_us: f64, beta_us_per_byte: f64) -> Result<()> {
        if src == dst {
            return Err(Error::InvalidSpec(format!("self-loop on NPU {src}")));
        }
        if src >= self.num_npus || dst >= self.num_npus {
            return Err(Error::InvalidSpec(format!(
                "link {src}->{dst} out of range for {} NPUs",
                self.num_npus
            )));
        }
        if alpha_us < 0.0 || beta_us_per_byte < 0.0 {
            return Err(Error::InvalidSpec(format!(
                "negative link cost on {src}->{dst}"
            )));
        }
        if self.links.contains_key(&(src, dst)) {
            return Err(Error::InvalidSpec(format!("duplicate link {src}->{dst}")));
        }
        self.links.insert(
            (src, dst),
            Link {
                src,
                dst,
                alpha_us,
                beta_us_per_byte,
            },
        );
        Ok(())
    }

    pub fn link(&self, src: NpuId, dst: NpuId) -> Option<&Link> {
        self.links.get(&(src, dst))
    }

    /// Links in deterministic (src, dst) order.
    pub fn links(&self) -> impl Iterator<Item = &Link> {
        self.links.values()
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn out_links(&self, src: NpuId) -> impl Iterator<Item = &Link> {
        self.links
            .range((src, 0)..=(src, usize::MAX))
            .map(|(_, l)| l)
    }

    pub fn in_links(&self, dst: NpuId) -> impl Iterator<Item = &Link> + '_ {
        self.links.values().filter(move |l| l.dst == dst)
    }

    /// Topology with every link direction flipped. Combining collectives are
    /// synthesized as a non-combining counterpart on the reversed graph and
    /// then inverted back onto the real links.
    pub fn reversed(&self) -> Topology {
        let mut rev = Topology::new(format!("{}_rev", self.name), self.num_npus);
        for l in self.links() {
            rev.add_link(l.dst, l.src, l.alpha_us, l.beta_us_per_byte)
                .expect("reversing valid links cannot fail");
        }
        rev
    }
}

/// Ring direction for builders and degree-1 switch unwinding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RingVariant {
    Uni,
    Bi,
}

pub fn build_ring(n: usize, variant: RingVariant, alpha_us: f64, bw_gbps: f64) -> Result<Topology> {
    if n < 2 {
        return Err(Error::InvalidSize(format!("ring needs >= 2 NPUs, got {n}")));
    }
    let beta = beta_from_gbps(bw_gbps);
    let tag = match variant {
        RingVariant::Uni => "uni",
        RingVariant::Bi => "bi",
    };
    let mut t = Topology::new(format!("ring{n}_{tag}"), n);
    for i in 0..n {
        let j = (i + 1) % n;
        if t.link(i, j).is_none() {
            t.add_link(i, j, alpha_us, beta)?;
        }
        if variant == RingVariant::Bi && t.link(j, i).is_none() {
            t.add_link(j, i, alpha_us, beta)?;
        }
    }
    Ok(t)
}

pub fn build_fully_connected(n: usize, alpha_us: f64, bw_gbps: f64) -> Result<Topology> {
    if n < 2 {
        return Err(Error::InvalidSize(format!(
            "fully connected needs >= 2 NPUs, got {n}"
        )));
    }
    let beta = beta_from_gbps(bw_gbps);
    let mut t = Topology::new(format!("fc{n}"), n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                t.add_link(i, j, alpha_us, beta)?;
            }
        }
    }
    Ok(t)
}

/// Grid with bidirectional links between 4-neighbors, row-major NPU ids.
pub fn build_mesh(rows: usize, cols: usize, alpha_us: f64, bw_gbps: f64) -> Result<Topology> {
    if rows == 0 || cols == 0 || rows * cols < 2 {
        return Err(Error::InvalidSize(format!("mesh {rows}x{cols} too small")));
    }
    let beta = beta_from_gbps(bw_gbps);
    let mut t = Topology::new(format!("mesh{rows}x{cols}"), rows * cols);
    let id = |r: usize, c: usize| r * cols + c;
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                t.add_link(id(r, c), id(r, c + 1), alpha_us, beta)?;
                t.add_link(id(r, c + 1), id(r, c), alpha_us, beta)?;
            }
            if r + 1 < rows {
                t.add_link(id(r, c), id(r + 1, c), alpha_us, beta)?;
                t.add_link(id(r + 1, c), id(r, c), alpha_us, beta)?;
            }
        }
    }
    t.grid = Some((rows, cols));
    Ok(t)
}

/// A switch fabric to be unwound into fixed point-to-point links.
#[derive(Debug, Clone, Copy)]
pub struct SwitchSpec {
    pub num_npus: usize,
    pub alpha_us: f64,
    /// Beta of the full switch bandwidth available to one NPU's egress.
    pub total_bw_beta: f64,
    /// Outgoing links per NPU after unwinding.
    pub degree: usize,
    /// Ring direction; only meaningful for degree 1.
    pub variant: RingVariant,
}

impl SwitchSpec {
    pub fn new(num_npus: usize, alpha_us: f64, bw_gbps: f64, degree: usize, variant: RingVariant) -> Self {
        SwitchSpec {
            num_npus,
            alpha_us,
            total_bw_beta: beta_from_gbps(bw_gbps),
            degree,
            variant,
        }
    }
}

/// Replace a switch with degree-d point-to-point links: NPU n gains links to
/// n+1..n+d (mod N). Alpha stays; egress bandwidth is split d ways, so each
/// link's beta becomes d * total_bw_beta (2x for the degree-1 bidirectional
/// variant, which has two outgoing links per NPU).
pub fn unwind_switch(spec: &SwitchSpec) -> Result<Topology> {
    let n = spec.num_npus;
    if n < 2 {
        return Err(Error::InvalidSize(format!("switch needs >= 2 NPUs, got {n}")));
    }
    let d = spec.degree;
    if d < 1 || d > n - 1 {
        return Err(Error::InvalidDegree {
            degree: d,
            num_npus: n,
            max: n - 1,
        });
    }
    let mut t = Topology::new(format!("switch{n}_d{d}"), n);
    if d == 1 && spec.variant == RingVariant::Bi {
        let beta = 2.0 * spec.total_bw_beta;
        for i in 0..n {
            let j = (i + 1) % n;
            if t.link(i, j).is_none() {
                t.add_link(i, j, spec.alpha_us, beta)?;
            }
            if t.link(j, i).is_none() {
                t.add_link(j, i, spec.alpha_us, beta)?;
            }
        }
        t.name = format!("switch{n}_d1bi");
        return Ok(t);
    }
    let beta = d as f64 * spec.total_bw_beta;
    for i in 0..n {
        for off in 1..=d {
            let j = (i + off) % n;
            if i != j && t.link(i, j).is_none() {
                t.add_link(i, j, spec.alpha_us, beta)?;
            }
        }
    }
    Ok(t)
}

/// Dimension-product composition: NPUs are coordinate tuples over the given
/// per-dimension topologies; dimension i's links connect NPUs that differ
/// only in coordinate i, replicated across all other coordinates.
///
/// NPU id encoding is mixed-radix with dimension 0 fastest:
/// `id = c0 + n0 * (c1 + n1 * (c2 + ...))`.
pub fn compose_hierarchical(dims: &[Topology]) -> Result<Topology> {
    if dims.is_empty() {
        return Err(Error::InvalidSpec("hierarchical composition needs >= 1 dimension".into()));
    }
    let sizes: Vec<usize> = dims.iter().map(|d| d.num_npus).collect();
    let total: usize = sizes.iter().product();
    let name = dims
        .iter()
        .map(|d| d.name.clone())
        .collect::<Vec<_>>()
        .join("_x_");
    let mut t = Topology::new(name, total);

    let mut stride = 1usize;
    for (i, dim) in dims.iter().enumerate() {
        let outer: usize = total / sizes[i];
        // Enumerate all coordinate combinations of the other dimensions.
        for rest in 0..outer {
            // Decompose `rest` into a base id with a hole at dimension i.
            let low = rest % stride;
            let high = rest / stride;
            let base = low + high * stride * sizes[i];
            for l in dim.links() {
                let u = base + l.src * stride;
                let v = base + l.dst * stride;
                t.add_link(u, v, l.alpha_us, l.beta_us_per_byte)?;
            }
        }
        stride *= sizes[i];
    }
    Ok(t)
}

/// Mapping from re-indexed NPU ids back to the original ids after fault
/// injection.
#[derive(Debug, Clone)]
pub struct NpuRemap {
    pub original_of_new: Vec<NpuId>,
    pub new_of_original: Vec<Option<NpuId>>,
}

/// Remove failed NPUs and every incident link; survivors are re-indexed
/// densely and the mapping is preserved for reporting.
pub fn remove_npus(t: &Topology, failed: &BTreeSet<NpuId>) -> Result<(Topology, NpuRemap)> {
    for &f in failed {
        if f >= t.num_npus {
            return Err(Error::InvalidSpec(format!(
                "failed NPU {f} out of range for {} NPUs",
                t.num_npus
            )));
        }
    }
    let mut original_of_new = Vec::new();
    let mut new_of_original = vec![None; t.num_npus];
    for old in 0..t.num_npus {
        if !failed.contains(&old) {
            new_of_original[old] = Some(original_of_new.len());
            original_of_new.push(old);
        }
    }
    let mut out = Topology::new(
        format!("{}_minus{}", t.name, failed.len()),
        original_of_new.len(),
    );
    for l in t.links() {
        if let (Some(s), Some(d)) = (new_of_original[l.src], new_of_original[l.dst]) {
            out.add_link(s, d, l.alpha_us, l.beta_us_per_byte)?;
        }
    }
    Ok((
        out,
        NpuRemap {
            original_of_new,
            new_of_original,
        },
    ))
}

/// A topology whose link delays have been quantized into timesteps of
/// `factor_us` microseconds each. `steps = ceil(delay / factor)`, so a
/// transmission always finishes within its allotted steps.
#[derive(Debug, Clone)]
pub struct DiscreteTopology {
    pub name: String,
    pub num_npus: usize,
    edges: BTreeMap<(NpuId, NpuId), usize>,
    pub factor_us: f64,
    pub chunk_size: u64,
}

impl DiscreteTopology {
    pub fn steps(&self, src: NpuId, dst: NpuId) -> Option<usize> {
        self.edges.get(&(src, dst)).copied()
    }

    /// Edges in deterministic (src, dst) order as (src, dst, steps).
    pub fn edges(&self) -> impl Iterator<Item = (NpuId, NpuId, usize)> + '_ {
        self.edges.iter().map(|(&(s, d), &k)| (s, d, k))
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn max_steps(&self) -> usize {
        self.edges.values().copied().max().unwrap_or(1)
    }

    pub fn out_edges(&self, src: NpuId) -> impl Iterator<Item = (NpuId, usize)> + '_ {
        self.edges
            .range((src, 0)..=(src, usize::MAX))
            .map(|(&(_, d), &k)| (d, k))
    }

    pub fn in_edges(&self, dst: NpuId) -> impl Iterator<Item = (NpuId, usize)> + '_ {
        self.edges
            .iter()
            .filter(move |(&(_, d), _)| d == dst)
            .map(|(&(s, _), &k)| (s, k))
    }
}

fn quantize(delay: f64, factor: f64) -> usize {
    let ratio = delay / factor;
    let mut k = ratio.ceil();
    // Snap down when floating point pushed the ratio a hair above an integer.
    if k - ratio > 1.0 - 1e-9 {
        k -= 1.0;
    }
    (k as usize).max(1)
}

/// Discretize link delays for the given chunk size. When no factor is given,
/// the minimum link delay is used so the fastest link maps to one timestep.
pub fn discretize(t: &Topology, chunk_size: u64, factor: Option<f64>) -> Result<DiscreteTopology> {
    if chunk_size == 0 {
        return Err(Error::InvalidSize("chunk_size must be > 0".into()));
    }
    if let Some(f) = factor {
        if f <= 0.0 || !f.is_finite() {
            return Err(Error::InvalidFactor(f));
        }
    }
    let delays: Vec<((NpuId, NpuId), f64)> = t
        .links()
        .map(|l| ((l.src, l.dst), l.delay_us(chunk_size)))
        .collect();
    for &(_, d) in &delays {
        if d <= 0.0 {
            return Err(Error::InvalidSpec(
                "all links must have positive delay for discretization".into(),
            ));
        }
    }
    let f = match factor {
        Some(f) => f,
        None => delays
            .iter()
            .map(|&(_, d)| d)
            .fold(f64::INFINITY, f64::min),
    };
    if !f.is_finite() {
        return Err(Error::InvalidSpec("topology has no links".into()));
    }
    let mut edges = BTreeMap::new();
    for ((s, d), delay) in delays {
        edges.insert((s, d), quantize(delay, f));
    }
    Ok(DiscreteTopology {
        name: t.name.clone(),
        num_npus: t.num_npus,
        edges,
        factor_us: f,
        chunk_size,
    })
}

pub const INF_STEPS: usize = usize::MAX;

/// All-pairs shortest paths in discretized steps with path reconstruction
/// (Floyd-Warshall).
#[derive(Debug, Clone)]
pub struct ShortestPaths {
    n: usize,
    dist: Vec<usize>,
    next: Vec<usize>,
}

impl ShortestPaths {
    pub fn dist(&self, u: NpuId, v: NpuId) -> usize {
        self.dist[u * self.n + v]
    }

    pub fn reachable(&self, u: NpuId, v: NpuId) -> bool {
        self.dist(u, v) != INF_STEPS
    }

    /// First hop on a shortest u->v path.
    pub fn next_hop(&self, u: NpuId, v: NpuId) -> Option<NpuId> {
        let h = self.next[u * self.n + v];
        (h != usize::MAX).then_some(h)
    }

    /// Node sequence from u to v inclusive, or None when unreachable.
    pub fn path(&self, u: NpuId, v: NpuId) -> Option<Vec<NpuId>> {
        if u == v {
            return Some(vec![u]);
        }
        if !self.reachable(u, v) {
            return None;
        }
        let mut path = vec![u];
        let mut cur = u;
        while cur != v {
            cur = self.next_hop(cur, v)?;
            path.push(cur);
        }
        Some(path)
    }
}

pub fn all_pairs_shortest_paths(dt: &DiscreteTopology) -> ShortestPaths {
    let n = dt.num_npus;
    let mut dist = vec![INF_STEPS; n * n];
    let mut next = vec![usize::MAX; n * n];
    for u in 0..n {
        dist[u * n + u] = 0;
    }
    for (s, d, k) in dt.edges() {
        if k < dist[s * n + d] {
            dist[s * n + d] = k;
            next[s * n + d] = d;
        }
    }
    for k in 0..n {
        for i in 0..n {
            let dik = dist[i * n + k];
            if dik == INF_STEPS {
                continue;
            }
            for j in 0..n {
                let dkj = dist[k * n + j];
                if dkj == INF_STEPS {
                    continue;
                }
                let through = dik + dkj;
                if through < dist[i * n + j] {
                    dist[i * n + j] = through;
                    next[i * n + j] = next[i * n + k];
                }
            }
        }
    }
    ShortestPaths { n, dist, next }
}

/// Longest finite shortest-path distance over ordered pairs, in timesteps.
pub fn diameter(dt: &DiscreteTopology) -> usize {
    let sp = all_pairs_shortest_paths(dt);
    let n = dt.num_npus;
    let mut best = 0;
    for u in 0..n {
        for v in 0..n {
            if u != v && sp.reachable(u, v) {
                best = best.max(sp.dist(u, v));
            }
        }
    }
    best
}

#[derive(Serialize, Deserialize)]
struct LinkJson {
    src: usize,
    dst: usize,
    alpha_us: f64,
    #[serde(rename = "bw_GBps")]
    bw_gbps: f64,
}

#[derive(Serialize, Deserialize)]
struct TopologyJson {
    name: String,
    npus: usize,
    links: Vec<LinkJson>,
}

impl Topology {
    /// Canonical JSON interchange format for the CLI.
    pub fn to_json(&self) -> Result<String> {
        let mut links = Vec::new();
        for l in self.links() {
            if l.beta_us_per_byte <= 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "link {}->{} has no finite bandwidth to serialize",
                    l.src, l.dst
                )));
            }
            links.push(LinkJson {
                src: l.src,
                dst: l.dst,
                alpha_us: l.alpha_us,
                bw_gbps: gbps_from_beta(l.beta_us_per_byte),
            });
        }
        Ok(serde_json::to_string_pretty(&TopologyJson {
            name: self.name.clone(),
            npus: self.num_npus,
            links,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Topology> {
        let parsed: TopologyJson = serde_json::from_str(text)?;
        let mut t = Topology::new(parsed.name, parsed.npus);
        for l in parsed.links {
            if l.bw_gbps <= 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "link {}->{} has bw_GBps <= 0",
                    l.src, l.dst
                )));
            }
            t.add_link(l.src, l.dst, l.alpha_us, beta_from_gbps(l.bw_gbps))?;
        }
        Ok(t)
    }
}
