//! Command-line front end: plan, price, simulate, and verify parallel
//! execution strategies for layer graphs.
//!
//! Human-readable tables go to standard output; machine artifacts (strategy
//! files, cost tables, event logs, gathered tensors) are written to files
//! only. Every run is deterministic given its input files and `--seed`,
//! and every report echoes the seed for replay. Exit codes: 0 success,
//! 1 verification failure, 2 usage or parse error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use parconv::dist::LayerDistribution;
use parconv::netgraph::{parse_network, NetworkGraph, TensorShape};
use parconv::perfmodel::{
    benchgen, memory_estimate, network_cost, parse_bench_shapes, CostTable, MachineModel,
};
use parconv::planner::{
    generate_candidates, instantiate_grids, parse_strategy, plan_dag, PlanOptions,
    DEFAULT_MAX_CANDIDATES,
};
use parconv::simexec::{run_step, validate_strategy, SimOptions, StepResult};
use parconv::synth::{random_params, random_step_data, rng_from_seed};
use parconv::verify::{artifact_errors, serial_step, uniform_strategies};

// ---------------------------------------------------------------------------
// Arguments
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "parconv",
    version,
    about = "Plan, price, and functionally verify sample- and spatial-parallel \
             execution strategies for convolutional network training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay one seeded training step under candidate strategies and
    /// compare every gathered artifact against the serial reference.
    Verify(VerifyArgs),
    /// Pick the cheapest per-layer partitioning for a network on a machine.
    Plan(PlanArgs),
    /// Price an existing strategy: per-layer and per-edge cost breakdown.
    Estimate(EstimateArgs),
    /// Time the reference kernels over a shapes file into a cost table.
    Benchgen(BenchgenArgs),
    /// Run one seeded step under a strategy and export the message log.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct VerifyArgs {
    /// Network document (JSON).
    #[arg(long)]
    net: PathBuf,
    /// Rank count; every valid uniform grid over this many ranks is checked.
    #[arg(long, default_value_t = 4)]
    ranks: usize,
    /// Check only the strategy in this file instead of all uniform grids.
    #[arg(long)]
    strategy: Option<PathBuf>,
    /// Seed for the synthetic parameters, input, and loss gradient.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worst acceptable relative error.
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
    /// Corrupt received halo rings with zeros (negative-test aid: spatial
    /// splits must then fail verification).
    #[arg(long, default_value_t = false)]
    debug_shrink_halo: bool,
}

#[derive(Args)]
struct PlanArgs {
    /// Network document (JSON).
    #[arg(long)]
    net: PathBuf,
    /// Machine model (`key = value` text).
    #[arg(long)]
    machine: PathBuf,
    /// Measured kernel-time table (CSV).
    #[arg(long)]
    costs: PathBuf,
    /// Write the chosen strategy to this file.
    #[arg(long)]
    strategy: Option<PathBuf>,
    /// Reject strategies whose worst rank exceeds this many bytes.
    #[arg(long)]
    mem_cap_bytes: Option<u64>,
    /// Keep at most this many candidates per layer.
    #[arg(long, default_value_t = DEFAULT_MAX_CANDIDATES)]
    max_candidates: usize,
    /// Price unmeasured shapes by log-linear interpolation instead of
    /// failing (approximation).
    #[arg(long, default_value_t = false)]
    interpolate_costs: bool,
    /// Echoed in the report; planning itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EstimateArgs {
    /// Network document (JSON).
    #[arg(long)]
    net: PathBuf,
    /// Machine model (`key = value` text).
    #[arg(long)]
    machine: PathBuf,
    /// Measured kernel-time table (CSV).
    #[arg(long)]
    costs: PathBuf,
    /// Strategy file to price.
    #[arg(long)]
    strategy: PathBuf,
    /// Price unmeasured shapes by log-linear interpolation instead of
    /// failing (approximation).
    #[arg(long, default_value_t = false)]
    interpolate_costs: bool,
    /// Echoed in the report.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchgenArgs {
    /// Shapes to time (CSV with header `n,c,h,w,f,k,s,pad`).
    #[arg(long)]
    shapes: PathBuf,
    /// Output cost-table path (CSV).
    #[arg(long)]
    costs: PathBuf,
    /// Timed repetitions per kernel (after three warmups).
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    /// Echoed in the report; timings use fixed synthetic data.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Network document (JSON).
    #[arg(long)]
    net: PathBuf,
    /// Strategy file to execute.
    #[arg(long)]
    strategy: PathBuf,
    /// Seed for the synthetic parameters, input, and loss gradient.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the message log (CSV) here.
    #[arg(long)]
    event_log: Option<PathBuf>,
    /// Write gathered step outputs (JSON) here.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Corrupt received halo rings with zeros (negative-test aid).
    #[arg(long, default_value_t = false)]
    debug_shrink_halo: bool,
}

// ---------------------------------------------------------------------------
// Plumbing
// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Verify(args) => cmd_verify(args),
        Command::Plan(args) => cmd_plan(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Benchgen(args) => cmd_benchgen(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_net(path: &Path) -> Result<NetworkGraph> {
    parse_network(&read(path)?).with_context(|| format!("parsing network {}", path.display()))
}

fn load_machine(path: &Path) -> Result<MachineModel> {
    MachineModel::parse(&read(path)?)
        .with_context(|| format!("parsing machine model {}", path.display()))
}

fn load_costs(path: &Path) -> Result<CostTable> {
    CostTable::parse_csv(&read(path)?)
        .with_context(|| format!("parsing cost table {}", path.display()))
}

fn load_strategy(g: &NetworkGraph, path: &Path) -> Result<Vec<LayerDistribution>> {
    let grids = parse_strategy(&read(path)?)
        .with_context(|| format!("parsing strategy {}", path.display()))?;
    instantiate_grids(g, &grids)
        .with_context(|| format!("applying strategy {}", path.display()))
}

fn grid_label(dists: &[LayerDistribution]) -> String {
    // Uniform strategies use one grid everywhere; mixed ones are summarized
    // by their per-layer extremes.
    let first = dists[0].grid;
    if dists.iter().all(|d| d.grid == first) {
        format!("{}x{}x{}", first.n_parts, first.h_parts, first.w_parts)
    } else {
        "mixed".to_string()
    }
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    let g = load_net(&args.net)?;
    let mut rng = rng_from_seed(args.seed);
    let params = random_params(&mut rng, &g);
    let (input, sink_grad) = random_step_data(&mut rng, &g);
    let opts = SimOptions { shrink_halo: args.debug_shrink_halo, ..SimOptions::default() };

    let strategies: Vec<(String, Vec<LayerDistribution>)> = match &args.strategy {
        Some(path) => {
            let dists = load_strategy(&g, path)?;
            validate_strategy(&g, &dists)?;
            vec![(grid_label(&dists), dists)]
        }
        None => uniform_strategies(&g, args.ranks)
            .into_iter()
            .map(|d| (grid_label(&d), d))
            .collect(),
    };
    anyhow::ensure!(
        !strategies.is_empty(),
        "no valid uniform strategy over {} ranks for this network",
        args.ranks
    );

    println!("seed: {}", args.seed);
    println!(
        "verify: {} ({} layers), {} strategies, tolerance {:e}",
        args.net.display(),
        g.len(),
        strategies.len(),
        args.tolerance
    );
    if args.debug_shrink_halo {
        println!("debug: received halo rings are being zeroed on purpose");
    }
    println!("{:<12} {:>12} {:>14} {:>14} {:>14}  status", "strategy", "output", "input-grad", "weight-grads", "bn-param-grads");

    let mut failures = 0usize;
    for (label, dists) in &strategies {
        let got = run_step(&g, dists, &params, &input, &sink_grad, &opts)?;
        let want = serial_step(&g, &params, &input, &sink_grad, Some(dists))?;
        let errors = artifact_errors(&got, &want);
        let pick = |prefix: &str| {
            errors
                .iter()
                .filter(|(name, _)| name.starts_with(prefix))
                .fold(0.0f64, |m, (_, e)| m.max(*e))
        };
        let worst = errors.iter().fold(0.0f64, |m, (_, e)| m.max(*e));
        let ok = worst <= args.tolerance;
        println!(
            "{:<12} {:>12.3e} {:>14.3e} {:>14.3e} {:>14.3e}  {}",
            label,
            pick("output"),
            pick("input-grad"),
            pick("weight-grad"),
            pick("bn-param-grad"),
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failures += 1;
            for (name, err) in &errors {
                if *err > args.tolerance {
                    report_divergence(&g, name, err, &got, &want);
                }
            }
        }
    }

    if failures == 0 {
        println!("PASS: {} strategies within {:e}", strategies.len(), args.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        println!(
            "FAIL: {failures} of {} strategies exceeded {:e}",
            strategies.len(),
            args.tolerance
        );
        Ok(ExitCode::from(1))
    }
}

/// Prints where a failing artifact diverges worst: the element index, both
/// values, and the artifact's relative error.
fn report_divergence(
    g: &NetworkGraph,
    name: &str,
    err: &f64,
    got: &StepResult,
    want: &parconv::verify::SerialOutputs,
) {
    let dense: Option<(&[f64], &[f64], Option<TensorShape>)> = if name == "output" {
        Some((&got.output.data, &want.output.data, Some(want.output.shape)))
    } else if name == "input-grad" {
        Some((&got.input_grad.data, &want.input_grad.data, Some(want.input_grad.shape)))
    } else if let Some(id) = name.strip_prefix("weight-grad[").and_then(|s| s.strip_suffix(']'))
    {
        Some((
            &got.conv_weight_grads[id].data,
            &want.conv_weight_grads[id].data,
            Some(want.conv_weight_grads[id].shape),
        ))
    } else {
        None
    };
    let _ = g;
    match dense {
        Some((a, b, shape)) => {
            let (idx, diff) = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .enumerate()
                .fold((0usize, 0.0f64), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
            let coord = match shape {
                Some(s) => {
                    let w = idx % s.w;
                    let h = (idx / s.w) % s.h;
                    let c = (idx / (s.w * s.h)) % s.c;
                    let n = idx / (s.w * s.h * s.c);
                    format!("(n={n},c={c},h={h},w={w})")
                }
                None => format!("[{idx}]"),
            };
            println!(
                "  {name}: rel err {err:.3e}, worst at {coord}: got {} want {} (|diff| {diff:.3e})",
                a[idx], b[idx]
            );
        }
        None => println!("  {name}: rel err {err:.3e}"),
    }
}

// ---------------------------------------------------------------------------
// plan / estimate
// ---------------------------------------------------------------------------

fn print_cost_table(
    g: &NetworkGraph,
    dists: &[LayerDistribution],
    m: &MachineModel,
    t: &CostTable,
    interpolate: bool,
) -> Result<()> {
    let nc = network_cost(g, dists, m, t, interpolate)?;
    let mem = memory_estimate(g, dists, m.word_bytes)?;

    println!(
        "{:<10} {:<16} {:>9} {:>11} {:>11} {:>11} {:>11} {:>11} {:>12}",
        "layer", "kind", "grid", "fp(s)", "bp-data(s)", "bp-wts(s)", "allred(s)", "shuffle(s)", "mem/rank(B)"
    );
    for idx in 0..g.len() {
        let layer = g.layer(idx);
        let c = &nc.layers[idx];
        let grid = dists[idx].grid;
        let shuffle: f64 = nc
            .edges
            .iter()
            .filter(|e| e.to == idx)
            .fold(0.0, |acc, e| acc + e.fwd_seconds + e.bwd_seconds);
        println!(
            "{:<10} {:<16} {:>9} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e} {:>12}",
            layer.id,
            layer.kind.name(),
            format!("{}x{}x{}", grid.n_parts, grid.h_parts, grid.w_parts),
            c.fp_compute + c.fp_halo_time,
            c.bp_data_compute + c.bp_halo_time,
            c.bp_weights_compute,
            c.bp_allreduce_time,
            shuffle,
            mem.per_layer[idx].total(),
        );
    }
    println!(
        "totals: fp {:.6e} s, bp {:.6e} s (allreduce exposed {:.6e} s), step {:.6e} s",
        nc.fp_time, nc.bp_time, nc.exposed_allreduce, nc.total
    );
    println!(
        "objective: {:.6e} s; worst-rank memory: {} bytes",
        nc.objective,
        mem.total_bytes
    );
    Ok(())
}

fn cmd_plan(args: PlanArgs) -> Result<ExitCode> {
    let g = load_net(&args.net)?;
    let m = load_machine(&args.machine)?;
    let t = load_costs(&args.costs)?;
    let opts = PlanOptions {
        mem_cap_bytes: args.mem_cap_bytes,
        max_candidates: args.max_candidates,
        interpolate: args.interpolate_costs,
    };

    let cands = generate_candidates(&g, &m, &opts)?;
    let plan = plan_dag(&g, &cands, &m, &t, &opts)?;

    println!("seed: {}", args.seed);
    println!(
        "plan: {} over {} ranks ({} candidate grids/layer max)",
        args.net.display(),
        m.ranks,
        args.max_candidates
    );
    if let Some(cap) = args.mem_cap_bytes {
        println!("memory cap: {cap} bytes per rank");
    }
    let dists = plan.distributions(&g)?;
    print_cost_table(&g, &dists, &m, &t, args.interpolate_costs)?;
    println!("predicted step time: {:.6e} s", plan.predicted_seconds);

    if let Some(path) = &args.strategy {
        fs::write(path, plan.render(&g))
            .with_context(|| format!("writing strategy {}", path.display()))?;
        println!("strategy written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_estimate(args: EstimateArgs) -> Result<ExitCode> {
    let g = load_net(&args.net)?;
    let m = load_machine(&args.machine)?;
    let t = load_costs(&args.costs)?;
    let dists = load_strategy(&g, &args.strategy)?;

    println!("seed: {}", args.seed);
    println!(
        "estimate: {} under {}",
        args.net.display(),
        args.strategy.display()
    );
    print_cost_table(&g, &dists, &m, &t, args.interpolate_costs)?;

    // Byte-level view, reconcilable against a simulation's event log.
    let nc = network_cost(&g, &dists, &m, &t, args.interpolate_costs)?;
    for idx in 0..g.len() {
        let c = &nc.layers[idx];
        if c.halo_fwd_bytes + c.halo_bwd_bytes + c.allreduce_bytes > 0 {
            println!(
                "bytes {}: halo fp {}, halo bp {}, allreduce {}",
                g.layer(idx).id,
                c.halo_fwd_bytes,
                c.halo_bwd_bytes,
                c.allreduce_bytes
            );
        }
    }
    for e in &nc.edges {
        if e.fwd_bytes + e.bwd_bytes > 0 {
            println!(
                "bytes {}->{}: shuffle fwd {}, shuffle bwd {}",
                g.layer(e.from).id,
                g.layer(e.to).id,
                e.fwd_bytes,
                e.bwd_bytes
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// benchgen / simulate
// ---------------------------------------------------------------------------

fn cmd_benchgen(args: BenchgenArgs) -> Result<ExitCode> {
    let shapes = parse_bench_shapes(&read(&args.shapes)?)
        .with_context(|| format!("parsing shapes {}", args.shapes.display()))?;
    println!("seed: {}", args.seed);
    println!(
        "benchgen: timing {} shapes x 3 kernel ops, mean of {} runs each",
        shapes.len(),
        args.repetitions
    );
    let table = benchgen(&shapes, args.repetitions);
    fs::write(&args.costs, table.to_csv())
        .with_context(|| format!("writing cost table {}", args.costs.display()))?;
    println!("cost table with {} entries written to {}", table.len(), args.costs.display());
    Ok(ExitCode::SUCCESS)
}

fn tensor_json(t: &parconv::kernels::Tensor4) -> serde_json::Value {
    serde_json::json!({
        "shape": [t.shape.n, t.shape.c, t.shape.h, t.shape.w],
        "data": t.data,
    })
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode> {
    let g = load_net(&args.net)?;
    let dists = load_strategy(&g, &args.strategy)?;
    validate_strategy(&g, &dists)?;
    let ranks = dists.iter().map(LayerDistribution::ranks).max().unwrap_or(1);

    let mut rng = rng_from_seed(args.seed);
    let params = random_params(&mut rng, &g);
    let (input, sink_grad) = random_step_data(&mut rng, &g);
    let opts = SimOptions { shrink_halo: args.debug_shrink_halo, ..SimOptions::default() };
    let result = run_step(&g, &dists, &params, &input, &sink_grad, &opts)?;

    println!("seed: {}", args.seed);
    println!(
        "simulate: {} under {} ({} ranks)",
        args.net.display(),
        args.strategy.display(),
        ranks
    );
    let total_by = |action: &str| -> u64 {
        result.events.events.iter().filter(|e| e.action == action).map(|e| e.bytes).sum()
    };
    println!(
        "events: {} total; bytes received: halo {}, shuffle {}, allreduce {}",
        result.events.events.len(),
        total_by("halo-recv"),
        total_by("shuffle-recv"),
        total_by("allreduce-recv"),
    );

    if let Some(path) = &args.event_log {
        fs::write(path, result.events.to_csv())
            .with_context(|| format!("writing event log {}", path.display()))?;
        println!("event log written to {}", path.display());
    }
    if let Some(path) = &args.output {
        let doc = serde_json::json!({
            "seed": args.seed,
            "output": tensor_json(&result.output),
            "input_grad": tensor_json(&result.input_grad),
            "conv_weight_grads": result
                .conv_weight_grads
                .iter()
                .map(|(id, t)| (id.clone(), tensor_json(t)))
                .collect::<serde_json::Map<String, serde_json::Value>>(),
            "bn_param_grads": result
                .bn_param_grads
                .iter()
                .map(|(id, (dg, db))| {
                    (id.clone(), serde_json::json!({ "dgamma": dg, "dbeta": db }))
                })
                .collect::<serde_json::Map<String, serde_json::Value>>(),
        });
        fs::write(path, serde_json::to_string_pretty(&doc).expect("tensors serialize"))
            .with_context(|| format!("writing outputs {}", path.display()))?;
        println!("gathered outputs written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
