//! Command-line front end: synthesize, evaluate, verify, and compare
//! collective schedules. Every output artifact gets a manifest recording the
//! command, input digests, configuration, and output digests.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use collsynth::collective::{make_collective, Collective, CollectiveKind};
use collsynth::driver::{synthesize, Synthesizer};
use collsynth::evaluator::{baseline_direct, baseline_ring, evaluate};
use collsynth::ilp::SynthesisConfig;
use collsynth::schedule::{verify_with, Schedule, VerifyOptions};
use collsynth::topology::{
    build_fully_connected, build_mesh, build_ring, compose_hierarchical, remove_npus,
    unwind_switch, RingVariant, SwitchSpec, Topology,
};

#[derive(Parser)]
#[command(name = "collsynth", version, about = "Topology-aware collective schedule synthesizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a collective schedule.
    Synth(SynthArgs),
    /// Replay a schedule under the alpha-beta cost model.
    Eval(EvalArgs),
    /// Check a schedule against its collective.
    Verify(VerifyArgs),
    /// Run every synthesizer and baseline, printing a normalized table.
    Compare(CompareArgs),
}

#[derive(Args, Clone)]
struct TopologyArgs {
    /// Topology JSON file.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Builder spec: ring:<n>[:uni|bi] | fc:<n> | mesh:<r>x<c> |
    /// switch:<n>:d<deg>[:bi]
    #[arg(long)]
    builder: Option<String>,
    /// Hierarchical composition dimensions (comma-separated builder specs).
    #[arg(long)]
    dims: Option<String>,
    /// Link latency in microseconds (per dimension when composing).
    #[arg(long, default_value = "0.5")]
    alpha_us: String,
    /// Link bandwidth in GB/s (per dimension when composing).
    #[arg(long, default_value = "100")]
    bw_gbps: String,
    /// Comma-separated NPU ids to remove before synthesis.
    #[arg(long)]
    fail: Option<String>,
}

#[derive(Args, Clone)]
struct CollectiveArgs {
    /// Collective kind (scatter, gather, broadcast, reduce, reduce-scatter,
    /// all-gather, all-reduce, all-to-all).
    #[arg(long)]
    collective: Option<String>,
    /// Custom collective JSON file.
    #[arg(long)]
    collective_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    chunks_per_npu: usize,
    #[arg(long, default_value_t = 1_048_576)]
    chunk_bytes: u64,
    /// Root NPU for rooted collectives.
    #[arg(long)]
    root: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    topology: TopologyArgs,
    #[command(flatten)]
    collective: CollectiveArgs,
    /// ilp | greedy | clustered | taccl-like
    #[arg(long, default_value = "greedy")]
    synthesizer: String,
    #[arg(long, default_value_t = 60.0)]
    time_limit: f64,
    #[arg(long, default_value_t = 0)]
    cluster_window: usize,
    /// Independent greedy searches (best result wins).
    #[arg(long, default_value_t = 8)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop the congestion constraints (with --synthesizer ilp).
    #[arg(long, default_value_t = false)]
    taccl_like: bool,
    /// Output schedule path.
    #[arg(long, default_value = "schedule.json")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    topology: TopologyArgs,
    /// Schedule JSON file.
    #[arg(long)]
    schedule: PathBuf,
    /// Write the per-send timeline as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    topology: TopologyArgs,
    #[command(flatten)]
    collective: CollectiveArgs,
    #[arg(long)]
    schedule: PathBuf,
    /// Ignore link-exclusivity (congestion) violations.
    #[arg(long, default_value_t = false)]
    relaxed: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    topology: TopologyArgs,
    #[command(flatten)]
    collective: CollectiveArgs,
    #[arg(long, default_value_t = 30.0)]
    time_limit: f64,
    #[arg(long, default_value_t = 0)]
    cluster_window: usize,
    #[arg(long, default_value_t = 8)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the comparison table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_list(text: &str, dims: usize) -> Result<Vec<f64>> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| anyhow!("bad number {p:?}: {e}")))
        .collect::<Result<_>>()?;
    if parts.len() == 1 {
        return Ok(vec![parts[0]; dims]);
    }
    if parts.len() != dims {
        bail!("expected 1 or {dims} values, got {}", parts.len());
    }
    Ok(parts)
}

fn build_one(spec: &str, alpha: f64, bw: f64) -> Result<Topology> {
    let parts: Vec<&str> = spec.split(':').collect();
    let topo = match parts[0] {
        "ring" => {
            let n = parts.get(1).context("ring:<n>")?.parse()?;
            let variant = match parts.get(2).copied() {
                None | Some("bi") => RingVariant::Bi,
                Some("uni") => RingVariant::Uni,
                Some(v) => bail!("unknown ring variant {v:?}"),
            };
            build_ring(n, variant, alpha, bw)?
        }
        "fc" => build_fully_connected(parts.get(1).context("fc:<n>")?.parse()?, alpha, bw)?,
        "mesh" => {
            let shape = parts.get(1).context("mesh:<r>x<c>")?;
            let (r, c) = shape
                .split_once('x')
                .context("mesh shape must be <rows>x<cols>")?;
            build_mesh(r.parse()?, c.parse()?, alpha, bw)?
        }
        "switch" => {
            let n = parts.get(1).context("switch:<n>:d<deg>")?.parse()?;
            let deg_part = parts.get(2).context("switch:<n>:d<deg>")?;
            let degree = deg_part
                .strip_prefix('d')
                .context("degree must look like d2")?
                .parse()?;
            let variant = match parts.get(3).copied() {
                Some("bi") => RingVariant::Bi,
                _ => RingVariant::Uni,
            };
            unwind_switch(&SwitchSpec::new(n, alpha, bw, degree, variant))?
        }
        other => bail!("unknown builder {other:?}"),
    };
    Ok(topo)
}

fn resolve_topology(args: &TopologyArgs) -> Result<(Topology, Vec<PathBuf>)> {
    let mut inputs = Vec::new();
    let mut topo = if let Some(path) = &args.topology {
        inputs.push(path.clone());
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        Topology::from_json(&text)?
    } else if let Some(dims_text) = &args.dims {
        let specs: Vec<&str> = dims_text.split(',').map(str::trim).collect();
        let alphas = parse_list(&args.alpha_us, specs.len())?;
        let bws = parse_list(&args.bw_gbps, specs.len())?;
        let dims: Vec<Topology> = specs
            .iter()
            .zip(alphas.iter().zip(&bws))
            .map(|(spec, (&a, &b))| build_one(spec, a, b))
            .collect::<Result<_>>()?;
        compose_hierarchical(&dims)?
    } else if let Some(spec) = &args.builder {
        let alphas = parse_list(&args.alpha_us, 1)?;
        let bws = parse_list(&args.bw_gbps, 1)?;
        build_one(spec, alphas[0], bws[0])?
    } else {
        bail!("need --topology, --builder, or --dims");
    };
    if let Some(fail) = &args.fail {
        let failed: BTreeSet<usize> = fail
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| anyhow!("bad NPU id {p:?}: {e}")))
            .collect::<Result<_>>()?;
        let (cut, _) = remove_npus(&topo, &failed)?;
        topo = cut;
    }
    Ok((topo, inputs))
}

fn resolve_collective(
    args: &CollectiveArgs,
    topo: &Topology,
) -> Result<(Collective, Vec<PathBuf>)> {
    if let Some(path) = &args.collective_file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        return Ok((Collective::from_json(&text)?, vec![path.clone()]));
    }
    let kind_text = args
        .collective
        .as_deref()
        .context("need --collective or --collective-file")?;
    let kind = CollectiveKind::parse(kind_text)?;
    let coll = make_collective(
        kind,
        topo.num_npus,
        args.chunks_per_npu,
        args.chunk_bytes,
        args.root,
    )?;
    Ok((coll, Vec::new()))
}

fn method_for(args: &SynthArgs) -> Result<Synthesizer> {
    let config = SynthesisConfig {
        time_limit: Duration::from_secs_f64(args.time_limit),
        cluster_window: args.cluster_window,
        t_f_start: None,
        taccl_like: args.taccl_like || args.synthesizer == "taccl-like",
        rng_seed: args.seed,
    };
    Ok(match args.synthesizer.as_str() {
        "ilp" | "taccl-like" => Synthesizer::Ilp(config),
        "clustered" => Synthesizer::Clustered(SynthesisConfig {
            cluster_window: if args.cluster_window == 0 {
                4
            } else {
                args.cluster_window
            },
            ..config
        }),
        "greedy" => Synthesizer::Greedy {
            runs: args.runs,
            seed: args.seed,
        },
        other => bail!("unknown synthesizer {other:?}"),
    })
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex_digest(&bytes))
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_manifest(
    out: &Path,
    inputs: &[PathBuf],
    config: serde_json::Value,
    seed: u64,
    outputs: &[PathBuf],
) -> Result<()> {
    let manifest = serde_json::json!({
        "command": std::env::args().collect::<Vec<String>>(),
        "inputs": inputs
            .iter()
            .map(|p| Ok(serde_json::json!({
                "path": p.display().to_string(),
                "sha256": sha256_file(p)?,
            })))
            .collect::<Result<Vec<_>>>()?,
        "config": config,
        "seed": seed,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "outputs": outputs
            .iter()
            .map(|p| Ok(serde_json::json!({
                "path": p.display().to_string(),
                "sha256": sha256_file(p)?,
            })))
            .collect::<Result<Vec<_>>>()?,
    });
    let path = out.with_extension("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<u8> {
    let (topo, mut inputs) = resolve_topology(&args.topology)?;
    let (coll, coll_inputs) = resolve_collective(&args.collective, &topo)?;
    inputs.extend(coll_inputs);
    let method = method_for(args)?;
    let start = Instant::now();
    let schedule = synthesize(&topo, &coll, args.collective.chunk_bytes, &method)?;
    let wall = start.elapsed();
    let report = evaluate(&schedule, &topo, args.collective.chunk_bytes)?;

    std::fs::write(&args.out, schedule.to_json()?)?;
    let config = serde_json::json!({
        "synthesizer": method.name(),
        "time_limit_s": args.time_limit,
        "cluster_window": args.cluster_window,
        "runs": args.runs,
        "taccl_like": args.taccl_like,
        "chunk_bytes": args.collective.chunk_bytes,
        "chunks_per_npu": args.collective.chunks_per_npu,
    });
    write_manifest(&args.out, &inputs, config, args.seed, &[args.out.clone()])?;

    println!(
        "t_f: {} steps (factor {:.6} us)",
        schedule.horizon, schedule.factor_us
    );
    println!("evaluated: {:.6} us", report.collective_time_us);
    println!("synthesis: {:.3} s", wall.as_secs_f64());
    println!("wrote {}", args.out.display());
    if schedule.provenance.optimal_steps == Some(false) {
        println!("note: time limit hit; result is not proven optimal");
        return Ok(4);
    }
    Ok(0)
}

fn cmd_eval(args: &EvalArgs) -> Result<u8> {
    let (topo, _) = resolve_topology(&args.topology)?;
    let text = std::fs::read_to_string(&args.schedule)?;
    let schedule = Schedule::from_json(&text)?;
    let report = evaluate(&schedule, &topo, schedule.chunk_bytes)?;
    println!("{}", report.to_json());
    if let Some(csv) = &args.csv {
        std::fs::write(csv, report.timeline_csv())?;
    }
    Ok(0)
}

fn cmd_verify(args: &VerifyArgs) -> Result<u8> {
    let (topo, _) = resolve_topology(&args.topology)?;
    let (coll, _) = resolve_collective(&args.collective, &topo)?;
    let text = std::fs::read_to_string(&args.schedule)?;
    let schedule = Schedule::from_json(&text)?;
    let report = verify_with(
        &schedule,
        &topo,
        &coll,
        VerifyOptions {
            ignore_congestion: args.relaxed,
        },
    );
    if report.is_ok() {
        println!("ok: schedule satisfies the collective");
        Ok(0)
    } else {
        for v in &report.violations {
            println!("violation: {v}");
        }
        Ok(1)
    }
}

fn cmd_compare(args: &CompareArgs) -> Result<u8> {
    let (topo, _) = resolve_topology(&args.topology)?;
    let (coll, _) = resolve_collective(&args.collective, &topo)?;
    let chunk = coll.chunk_size();
    let window = if args.cluster_window == 0 {
        4
    } else {
        args.cluster_window
    };
    let config = SynthesisConfig {
        time_limit: Duration::from_secs_f64(args.time_limit),
        cluster_window: window,
        t_f_start: None,
        taccl_like: false,
        rng_seed: args.seed,
    };
    let mut rows: Vec<(String, f64, f64)> = Vec::new(); // name, time_us, synth_s
    let run = |name: &str, result: collsynth::Result<Schedule>| match result {
        Ok(s) => {
            let t0 = Instant::now();
            let _ = t0;
            match evaluate(&s, &topo, chunk) {
                Ok(r) => Some((name.to_string(), r.collective_time_us)),
                Err(e) => {
                    eprintln!("{name}: evaluation failed: {e}");
                    None
                }
            }
        }
        Err(e) => {
            eprintln!("{name}: {e}");
            None
        }
    };
    let timed = |rows: &mut Vec<(String, f64, f64)>,
                     name: &str,
                     f: &mut dyn FnMut() -> collsynth::Result<Schedule>| {
        let t0 = Instant::now();
        let result = f();
        let wall = t0.elapsed().as_secs_f64();
        if let Some((n, cost)) = run(name, result) {
            rows.push((n, cost, wall));
        }
    };

    timed(&mut rows, "ilp", &mut || {
        synthesize(&topo, &coll, chunk, &Synthesizer::Ilp(config.clone()))
    });
    timed(&mut rows, "greedy", &mut || {
        synthesize(
            &topo,
            &coll,
            chunk,
            &Synthesizer::Greedy {
                runs: args.runs,
                seed: args.seed,
            },
        )
    });
    timed(&mut rows, "clustered", &mut || {
        synthesize(&topo, &coll, chunk, &Synthesizer::Clustered(config.clone()))
    });
    let mut taccl = config.clone();
    taccl.taccl_like = true;
    timed(&mut rows, "taccl-like", &mut || {
        synthesize(&topo, &coll, chunk, &Synthesizer::Ilp(taccl.clone()))
    });
    timed(&mut rows, "ring", &mut || baseline_ring(&topo, &coll));
    timed(&mut rows, "direct", &mut || baseline_direct(&topo, &coll));

    if rows.is_empty() {
        bail!("every method failed");
    }
    let best = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    println!("{:<12} {:>10} {:>14} {:>12}", "method", "normalized", "time_us", "synth");
    let mut csv = String::from("method,normalized,time_us,synth_s\n");
    for (name, cost, wall) in &rows {
        println!(
            "{:<12} {:>10.2} {:>14.3} {:>12}",
            name,
            cost / best,
            cost,
            format!("[{:.3}s]", wall)
        );
        csv.push_str(&format!("{name},{:.4},{cost:.3},{wall:.3}\n", cost / best));
    }
    if let Some(path) = &args.csv {
        std::fs::write(path, csv)?;
    }
    Ok(0)
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<collsynth::Error>() {
        match e {
            collsynth::Error::UnreachableDestination { .. } => 3,
            _ => 2,
        }
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
