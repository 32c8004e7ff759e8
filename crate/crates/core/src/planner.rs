//! Candidate partitionings and strategy selection.
//!
//! A strategy assigns every layer a rank grid. Its planning objective
//! decomposes into per-layer terms (exposed compute-plus-halo time and the
//! weight-gradient allreduce) plus per-edge redistribution time, so on an
//! unbranched chain the cheapest assignment is an exact layered
//! shortest-path problem. Branchy graphs are planned path by path — the
//! heaviest source-to-sink path first, later paths around layers already
//! fixed — followed by a local-improvement sweep; the result is never worse
//! than the best single uniform grid common to every layer's candidates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::dist::{LayerDistribution, ProcGrid};
use crate::netgraph::{LayerKind, NetworkGraph};
use crate::perfmodel::{
    edge_shuffles, layer_cost, layer_memory, memory_estimate, network_cost, shuffle_cost,
    CostTable, LayerCost, MachineModel, PerfError,
};
use crate::verify::factor_triples;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("layer `{layer}`: no feasible candidate (binding constraint: {constraint})")]
    NoFeasibleCandidate { layer: String, constraint: &'static str },
    #[error("layer `{layer}` has an empty candidate list")]
    EmptyCandidates { layer: String },
    #[error("candidate set covers {got} layers but the network has {want}")]
    CandidateCountMismatch { got: usize, want: usize },
    #[error("the line planner requires an unbranched network")]
    NotALine,
    #[error("rank {rank} needs {bytes} bytes, above the {cap}-byte memory cap")]
    MemoryCapExceeded { rank: usize, bytes: u64, cap: u64 },
    #[error("strategy file line {line}: {msg}")]
    StrategyFormat { line: usize, msg: String },
    #[error("strategy does not assign layer `{layer}`")]
    MissingAssignment { layer: String },
    #[error("strategy names unknown layer `{layer}`")]
    UnknownLayer { layer: String },
    #[error(transparent)]
    Perf(#[from] PerfError),
}

// ---------------------------------------------------------------------------
// Candidates
// ---------------------------------------------------------------------------

/// How a candidate grid splits the work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Only the sample dimension is split (includes the serial 1x1x1 grid).
    SampleOnly,
    /// Only spatial dimensions are split.
    Spatial,
    /// Sample and spatial dimensions are both split.
    Hybrid,
}

impl Provenance {
    pub fn of(grid: ProcGrid) -> Self {
        let spatial = grid.h_parts > 1 || grid.w_parts > 1;
        match (grid.n_parts > 1, spatial) {
            (_, false) => Provenance::SampleOnly,
            (false, true) => Provenance::Spatial,
            (true, true) => Provenance::Hybrid,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Provenance::SampleOnly => "sample-only",
            Provenance::Spatial => "spatial",
            Provenance::Hybrid => "hybrid",
        }
    }
}

/// One admissible distribution for one layer.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub dist: LayerDistribution,
    pub provenance: Provenance,
}

/// Per-layer candidate lists, indexed like the network's layers. Lists are
/// ordered sample-split-first (larger `n_parts` first, then squarer and
/// taller spatial grids) and never empty.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub per_layer: Vec<Vec<Candidate>>,
}

impl CandidateSet {
    /// The candidate distributions alone, in list order.
    pub fn layer_dists(&self, idx: usize) -> Vec<LayerDistribution> {
        self.per_layer[idx].iter().map(|c| c.dist.clone()).collect()
    }

    /// All layers' candidate distributions (for cost-table synthesis).
    pub fn all_dists(&self) -> Vec<Vec<LayerDistribution>> {
        (0..self.per_layer.len()).map(|i| self.layer_dists(i)).collect()
    }
}

/// Knobs shared by candidate generation and planning.
#[derive(Debug, Clone)]
pub struct PlanOptions {
    /// Reject strategies whose worst rank exceeds this many bytes.
    pub mem_cap_bytes: Option<u64>,
    /// Keep at most this many candidates per layer (in preference order).
    pub max_candidates: usize,
    /// Allow log-linear cost-table interpolation for unmeasured shapes.
    pub interpolate: bool,
}

pub const DEFAULT_MAX_CANDIDATES: usize = 16;

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            mem_cap_bytes: None,
            max_candidates: DEFAULT_MAX_CANDIDATES,
            interpolate: false,
        }
    }
}

/// Rejection reasons in reporting-precedence order: when a layer ends up
/// with no feasible candidate, the reason that rejected the most grids (ties
/// toward the front of this list) is named as the binding constraint.
const CONSTRAINTS: [&str; 6] = [
    "sample parts exceed the batch size",
    "fully-connected layers cannot split spatially",
    "empty local block",
    "local spatial extent below halo radius + 1",
    "halo wider than a neighbour block",
    "memory cap",
];
const C_SAMPLE: usize = 0;
const C_FC: usize = 1;
const C_EMPTY: usize = 2;
const C_EXTENT: usize = 3;
const C_HALO: usize = 4;
const C_MEMORY: usize = 5;

fn grid_tuple(g: ProcGrid) -> (usize, usize, usize) {
    (g.n_parts, g.h_parts, g.w_parts)
}

/// Enumerates admissible rank grids per layer. Windowed layers (and layers
/// without parents) draw from every factorization of the rank count into
/// `(n_parts, h_parts, w_parts)`; all other layers inherit their parents'
/// surviving grids, preserving order. Grids are dropped when they split
/// samples finer than the batch, leave a rank with an empty block, leave a
/// windowed layer less local extent than `radius + 1`, need halo wider than
/// a neighbour's block, or exceed the memory cap on this layer alone.
pub fn generate_candidates(
    g: &NetworkGraph,
    m: &MachineModel,
    opts: &PlanOptions,
) -> Result<CandidateSet, PlanError> {
    let triples = factor_triples(m.ranks);
    let mut per_layer: Vec<Vec<Candidate>> = Vec::with_capacity(g.len());

    for idx in 0..g.len() {
        let layer = g.layer(idx);
        let shapes = g.shapes(idx);
        let mut rejected = [0usize; CONSTRAINTS.len()];
        let mut list: Vec<Candidate> = Vec::new();

        let windowed = layer.kind.window();
        let own_enumeration = windowed.is_some()
            || g.parents(idx).is_empty()
            || matches!(layer.kind, LayerKind::FullyConnected { .. });

        let grids: Vec<ProcGrid> = if own_enumeration {
            triples.iter().map(|&(n, h, w)| ProcGrid::new(n, h, w)).collect()
        } else {
            let mut seen = Vec::new();
            for &p in g.parents(idx) {
                for cand in &per_layer[p] {
                    if !seen.contains(&cand.dist.grid) {
                        seen.push(cand.dist.grid);
                    }
                }
            }
            seen
        };

        for grid in grids {
            if grid.n_parts > shapes.input.n {
                rejected[C_SAMPLE] += 1;
                continue;
            }
            if matches!(layer.kind, LayerKind::FullyConnected { .. })
                && (grid.h_parts > 1 || grid.w_parts > 1)
            {
                rejected[C_FC] += 1;
                continue;
            }
            let d = LayerDistribution::new(grid, shapes.input, shapes.output);
            if shapes.input.h < grid.h_parts
                || shapes.input.w < grid.w_parts
                || shapes.output.h < grid.h_parts
                || shapes.output.w < grid.w_parts
            {
                rejected[C_EMPTY] += 1;
                continue;
            }
            if let Some(win) = windowed {
                let radius = win.size / 2;
                if shapes.input.h / grid.h_parts < radius + 1
                    || shapes.input.w / grid.w_parts < radius + 1
                {
                    rejected[C_EXTENT] += 1;
                    continue;
                }
                let fwd = match layer.kind {
                    LayerKind::Pool(_) => crate::dist::pool_halo_spec(&d, win),
                    _ => crate::dist::halo_spec(&d, win),
                };
                if fwd.is_err() || crate::dist::gradient_halo_spec(&d, win).is_err() {
                    rejected[C_HALO] += 1;
                    continue;
                }
            }
            if let Some(cap) = opts.mem_cap_bytes {
                let (worst, _) = layer_memory(g, idx, &d, m.word_bytes)?;
                if worst.total() > cap {
                    rejected[C_MEMORY] += 1;
                    continue;
                }
            }
            list.push(Candidate { provenance: Provenance::of(grid), dist: d });
        }

        if list.is_empty() {
            // Name the rule that rejected the most grids; ties go to the
            // later (more specific) rule in the filter chain.
            let binding = (0..CONSTRAINTS.len())
                .max_by_key(|&i| (rejected[i], i))
                .unwrap_or(C_EMPTY);
            return Err(PlanError::NoFeasibleCandidate {
                layer: layer.id.clone(),
                constraint: CONSTRAINTS[binding],
            });
        }
        list.truncate(opts.max_candidates);
        per_layer.push(list);
    }

    Ok(CandidateSet { per_layer })
}

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

/// A full assignment of one distribution per layer, with its predicted
/// timeline and memory footprint.
#[derive(Debug, Clone)]
pub struct Strategy {
    pub assignments: BTreeMap<String, LayerDistribution>,
    pub layer_costs: BTreeMap<String, LayerCost>,
    /// Predicted step time with overlap (the network-cost timeline total).
    pub predicted_seconds: f64,
    /// The decomposable objective the planner minimized.
    pub objective_seconds: f64,
    pub fp_seconds: f64,
    pub bp_seconds: f64,
    pub exposed_allreduce_seconds: f64,
    pub per_rank_memory: Vec<u64>,
}

impl Strategy {
    /// The assigned grids keyed by layer id.
    pub fn grids(&self) -> BTreeMap<String, ProcGrid> {
        self.assignments.iter().map(|(id, d)| (id.clone(), d.grid)).collect()
    }

    /// The assignment as one distribution per layer in graph order.
    pub fn distributions(&self, g: &NetworkGraph) -> Result<Vec<LayerDistribution>, PlanError> {
        instantiate_grids(g, &self.grids())
    }

    /// Renders the strategy file: one `layer` line per layer in graph
    /// order, then the predicted cost breakdown.
    pub fn render(&self, g: &NetworkGraph) -> String {
        let mut out = String::from("strategy v1\n");
        for idx in 0..g.len() {
            let id = &g.layer(idx).id;
            let grid = self.assignments[id].grid;
            let _ = writeln!(
                out,
                "layer {id} {{n_parts={},h_parts={},w_parts={}}}",
                grid.n_parts, grid.h_parts, grid.w_parts
            );
        }
        let _ = writeln!(out, "cost predicted_seconds {}", self.predicted_seconds);
        let _ = writeln!(out, "cost objective_seconds {}", self.objective_seconds);
        let _ = writeln!(out, "cost fp_seconds {}", self.fp_seconds);
        let _ = writeln!(out, "cost bp_seconds {}", self.bp_seconds);
        let _ = writeln!(
            out,
            "cost exposed_allreduce_seconds {}",
            self.exposed_allreduce_seconds
        );
        let _ = writeln!(
            out,
            "cost memory_worst_rank_bytes {}",
            self.per_rank_memory.iter().max().copied().unwrap_or(0)
        );
        out
    }
}

/// Parses a strategy file back into grids keyed by layer id. `cost` lines
/// are informational and skipped.
pub fn parse_strategy(text: &str) -> Result<BTreeMap<String, ProcGrid>, PlanError> {
    let mut grids = BTreeMap::new();
    let mut saw_header = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != "strategy v1" {
                return Err(PlanError::StrategyFormat {
                    line: lineno,
                    msg: format!("expected header `strategy v1`, found `{line}`"),
                });
            }
            saw_header = true;
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("layer") => {
                let id = parts.next().ok_or_else(|| PlanError::StrategyFormat {
                    line: lineno,
                    msg: "missing layer id".into(),
                })?;
                let spec = parts.next().ok_or_else(|| PlanError::StrategyFormat {
                    line: lineno,
                    msg: "missing grid spec".into(),
                })?;
                let grid = parse_grid_spec(spec).map_err(|msg| PlanError::StrategyFormat {
                    line: lineno,
                    msg,
                })?;
                if grids.insert(id.to_string(), grid).is_some() {
                    return Err(PlanError::StrategyFormat {
                        line: lineno,
                        msg: format!("layer `{id}` assigned twice"),
                    });
                }
            }
            Some("cost") => {}
            Some(other) => {
                return Err(PlanError::StrategyFormat {
                    line: lineno,
                    msg: format!("unknown directive `{other}`"),
                });
            }
            None => unreachable!("blank lines are skipped"),
        }
    }
    if grids.is_empty() {
        return Err(PlanError::StrategyFormat {
            line: 1,
            msg: "no layer assignments found".into(),
        });
    }
    Ok(grids)
}

/// Parses `{n_parts=A,h_parts=B,w_parts=C}`.
fn parse_grid_spec(spec: &str) -> Result<ProcGrid, String> {
    let body = spec
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| format!("grid spec `{spec}` is not brace-enclosed"))?;
    let mut parts: [Option<usize>; 3] = [None, None, None];
    for field in body.split(',') {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| format!("field `{field}` is not key=value"))?;
        let slot = match key.trim() {
            "n_parts" => 0,
            "h_parts" => 1,
            "w_parts" => 2,
            other => return Err(format!("unknown field `{other}`")),
        };
        let v: usize = value
            .trim()
            .parse()
            .map_err(|_| format!("field `{key}` has non-integer value `{value}`"))?;
        if v == 0 {
            return Err(format!("field `{key}` must be positive"));
        }
        if parts[slot].replace(v).is_some() {
            return Err(format!("field `{key}` given twice"));
        }
    }
    match parts {
        [Some(n), Some(h), Some(w)] => Ok(ProcGrid::new(n, h, w)),
        _ => Err("grid spec needs n_parts, h_parts and w_parts".into()),
    }
}

/// Builds one distribution per layer (graph order) from grids keyed by
/// layer id, requiring an exact one-to-one mapping.
pub fn instantiate_grids(
    g: &NetworkGraph,
    grids: &BTreeMap<String, ProcGrid>,
) -> Result<Vec<LayerDistribution>, PlanError> {
    for id in grids.keys() {
        if !(0..g.len()).any(|i| g.layer(i).id == *id) {
            return Err(PlanError::UnknownLayer { layer: id.clone() });
        }
    }
    let mut dists = Vec::with_capacity(g.len());
    for idx in 0..g.len() {
        let layer = g.layer(idx);
        let grid = grids
            .get(&layer.id)
            .ok_or_else(|| PlanError::MissingAssignment { layer: layer.id.clone() })?;
        let shapes = g.shapes(idx);
        dists.push(LayerDistribution::new(*grid, shapes.input, shapes.output));
    }
    Ok(dists)
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

fn check_candidate_set(g: &NetworkGraph, cands: &CandidateSet) -> Result<(), PlanError> {
    if cands.per_layer.len() != g.len() {
        return Err(PlanError::CandidateCountMismatch {
            got: cands.per_layer.len(),
            want: g.len(),
        });
    }
    for idx in 0..g.len() {
        if cands.per_layer[idx].is_empty() {
            return Err(PlanError::EmptyCandidates { layer: g.layer(idx).id.clone() });
        }
    }
    Ok(())
}

/// Per-layer planning objective of every candidate: exposed forward and
/// backward time plus the weight-gradient allreduce.
fn price_layers(
    g: &NetworkGraph,
    cands: &CandidateSet,
    m: &MachineModel,
    t: &CostTable,
    interpolate: bool,
) -> Result<Vec<Vec<f64>>, PlanError> {
    let mut jcost = Vec::with_capacity(g.len());
    for idx in 0..g.len() {
        let mut row = Vec::with_capacity(cands.per_layer[idx].len());
        for cand in &cands.per_layer[idx] {
            row.push(layer_cost(g, idx, &cand.dist, m, t, interpolate)?.objective());
        }
        jcost.push(row);
    }
    Ok(jcost)
}

/// Both redistributions priced on one edge (forward data plus backward
/// error signal).
fn edge_cost(
    parent: &LayerDistribution,
    child: &LayerDistribution,
    m: &MachineModel,
) -> Result<f64, PlanError> {
    let (fwd, bwd) = edge_shuffles(parent, child)?;
    Ok(shuffle_cost(&fwd, m) + shuffle_cost(&bwd, m))
}

/// Exact minimum-cost assignment along a path of layers. `lists[i]` holds
/// the admissible candidate indices (into `cands.per_layer[nodes[i]]`) for
/// stage `i`. Cost ties prefer the lexicographically smallest
/// `(n_parts, h_parts, w_parts)` front to back. Returns one chosen
/// candidate index per stage.
fn path_dp(
    nodes: &[usize],
    lists: &[Vec<usize>],
    cands: &CandidateSet,
    jcost: &[Vec<f64>],
    m: &MachineModel,
) -> Result<Vec<usize>, PlanError> {
    let n = nodes.len();
    debug_assert_eq!(lists.len(), n);
    let dist_of = |stage: usize, c: usize| &cands.per_layer[nodes[stage]][c].dist;

    // Positions of each stage's list sorted by grid tuple, so min-scans in
    // this order resolve ties toward the lexicographically smallest grid.
    let lex: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut order: Vec<usize> = (0..lists[i].len()).collect();
            order.sort_by_key(|&p| grid_tuple(dist_of(i, lists[i][p]).grid));
            order
        })
        .collect();

    // best_from[i][p]: cheapest cost of stages i.. when stage i takes its
    // p-th listed candidate; link[i][p]: the successor position achieving it.
    let mut best_from: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut link: Vec<Vec<usize>> = vec![Vec::new(); n];
    best_from[n - 1] = lists[n - 1].iter().map(|&c| jcost[nodes[n - 1]][c]).collect();
    link[n - 1] = vec![usize::MAX; lists[n - 1].len()];

    for i in (0..n - 1).rev() {
        let mut row = Vec::with_capacity(lists[i].len());
        let mut links = Vec::with_capacity(lists[i].len());
        for &c in &lists[i] {
            let a = dist_of(i, c);
            let mut best = f64::INFINITY;
            let mut best_link = 0usize;
            for &p2 in &lex[i + 1] {
                let b = dist_of(i + 1, lists[i + 1][p2]);
                let total = edge_cost(a, b, m)? + best_from[i + 1][p2];
                if total < best {
                    best = total;
                    best_link = p2;
                }
            }
            row.push(jcost[nodes[i]][c] + best);
            links.push(best_link);
        }
        best_from[i] = row;
        link[i] = links;
    }

    let mut start = 0usize;
    let mut best = f64::INFINITY;
    for &p in &lex[0] {
        if best_from[0][p] < best {
            best = best_from[0][p];
            start = p;
        }
    }

    let mut chosen = Vec::with_capacity(n);
    let mut at = start;
    for i in 0..n {
        chosen.push(lists[i][at]);
        at = link[i][at];
    }
    Ok(chosen)
}

/// Walks an unbranched graph from its source to its sink.
fn line_order(g: &NetworkGraph) -> Vec<usize> {
    let mut order = Vec::with_capacity(g.len());
    let mut at = g.sources()[0];
    loop {
        order.push(at);
        match g.children(at).first() {
            Some(&next) => at = next,
            None => break,
        }
    }
    debug_assert_eq!(order.len(), g.len(), "a line visits every layer once");
    order
}

fn finalize(
    g: &NetworkGraph,
    cands: &CandidateSet,
    chosen: &[usize],
    m: &MachineModel,
    t: &CostTable,
    opts: &PlanOptions,
) -> Result<Strategy, PlanError> {
    let dists: Vec<LayerDistribution> =
        chosen.iter().enumerate().map(|(i, &c)| cands.per_layer[i][c].dist.clone()).collect();
    let nc = network_cost(g, &dists, m, t, opts.interpolate)?;
    let mem = memory_estimate(g, &dists, m.word_bytes)?;
    if let Some(cap) = opts.mem_cap_bytes {
        for (rank, &bytes) in mem.per_rank_total.iter().enumerate() {
            if bytes > cap {
                return Err(PlanError::MemoryCapExceeded { rank, bytes, cap });
            }
        }
    }

    let mut assignments = BTreeMap::new();
    let mut layer_costs = BTreeMap::new();
    for idx in 0..g.len() {
        let id = g.layer(idx).id.clone();
        assignments.insert(id.clone(), dists[idx].clone());
        layer_costs.insert(id, nc.layers[idx].clone());
    }
    Ok(Strategy {
        assignments,
        layer_costs,
        predicted_seconds: nc.total,
        objective_seconds: nc.objective,
        fp_seconds: nc.fp_time,
        bp_seconds: nc.bp_time,
        exposed_allreduce_seconds: nc.exposed_allreduce,
        per_rank_memory: mem.per_rank_total,
    })
}

/// Exact planner for unbranched networks: a layered shortest path over the
/// candidate lists, edge weights `J(layer) + shuffle(parent, child)`, with
/// the last layer's objective on the sink edges. The returned strategy's
/// cost equals the exhaustive minimum over all candidate assignments.
pub fn plan_line(
    g: &NetworkGraph,
    cands: &CandidateSet,
    m: &MachineModel,
    t: &CostTable,
    opts: &PlanOptions,
) -> Result<Strategy, PlanError> {
    if !g.is_line() {
        return Err(PlanError::NotALine);
    }
    check_candidate_set(g, cands)?;
    let jcost = price_layers(g, cands, m, t, opts.interpolate)?;
    let order = line_order(g);
    let lists: Vec<Vec<usize>> =
        order.iter().map(|&node| (0..cands.per_layer[node].len()).collect()).collect();
    let picked = path_dp(&order, &lists, cands, &jcost, m)?;
    let mut chosen = vec![0usize; g.len()];
    for (stage, &node) in order.iter().enumerate() {
        chosen[node] = picked[stage];
    }
    finalize(g, cands, &chosen, m, t, opts)
}

/// One pass of single-layer improvements: each layer in declaration order
/// re-picks the candidate minimizing its own objective plus the shuffles on
/// every incident edge, holding the rest fixed. Strict improvements only,
/// so the sweep terminates; ties keep the current choice.
fn improvement_sweeps(
    g: &NetworkGraph,
    cands: &CandidateSet,
    jcost: &[Vec<f64>],
    m: &MachineModel,
    chosen: &mut [usize],
) -> Result<(), PlanError> {
    for _ in 0..8 {
        let mut changed = false;
        for idx in 0..g.len() {
            let local = |c: usize, chosen: &[usize]| -> Result<f64, PlanError> {
                let d = &cands.per_layer[idx][c].dist;
                let mut total = jcost[idx][c];
                for &p in g.parents(idx) {
                    total += edge_cost(&cands.per_layer[p][chosen[p]].dist, d, m)?;
                }
                for &ch in g.children(idx) {
                    total += edge_cost(d, &cands.per_layer[ch][chosen[ch]].dist, m)?;
                }
                Ok(total)
            };
            let mut best = local(chosen[idx], chosen)?;
            let mut best_c = chosen[idx];
            let mut order: Vec<usize> = (0..cands.per_layer[idx].len()).collect();
            order.sort_by_key(|&c| grid_tuple(cands.per_layer[idx][c].dist.grid));
            for c in order {
                if c == chosen[idx] {
                    continue;
                }
                let v = local(c, chosen)?;
                if v < best {
                    best = v;
                    best_c = c;
                }
            }
            if best_c != chosen[idx] {
                chosen[idx] = best_c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(())
}

/// The cheapest constant assignment drawn from the candidate sets: one grid
/// common to every layer, applied everywhere. Returns the chosen candidate
/// indices and the objective, skipping grids that break the memory cap.
fn best_uniform(
    g: &NetworkGraph,
    cands: &CandidateSet,
    m: &MachineModel,
    t: &CostTable,
    opts: &PlanOptions,
) -> Result<Option<(Vec<usize>, f64)>, PlanError> {
    // Grids present in every layer's list, with each layer's index for them.
    let mut common: Vec<(ProcGrid, Vec<usize>)> = cands.per_layer[0]
        .iter()
        .enumerate()
        .map(|(i, c)| (c.dist.grid, vec![i]))
        .collect();
    for idx in 1..g.len() {
        common.retain_mut(|(grid, picks)| {
            match cands.per_layer[idx].iter().position(|c| c.dist.grid == *grid) {
                Some(p) => {
                    picks.push(p);
                    true
                }
                None => false,
            }
        });
        if common.is_empty() {
            return Ok(None);
        }
    }
    common.sort_by_key(|(grid, _)| grid_tuple(*grid));

    let mut best: Option<(Vec<usize>, f64)> = None;
    for (_, picks) in common {
        let dists: Vec<LayerDistribution> =
            picks.iter().enumerate().map(|(i, &c)| cands.per_layer[i][c].dist.clone()).collect();
        if let Some(cap) = opts.mem_cap_bytes {
            let mem = memory_estimate(g, &dists, m.word_bytes)?;
            if mem.per_rank_total.iter().any(|&b| b > cap) {
                continue;
            }
        }
        let objective = network_cost(g, &dists, m, t, opts.interpolate)?.objective;
        if best.as_ref().is_none_or(|(_, b)| objective < *b) {
            best = Some((picks, objective));
        }
    }
    Ok(best)
}

/// Plans a general DAG. Unbranched networks take the exact line planner.
/// Otherwise the heaviest source-to-sink path (by per-layer best-case
/// objective) is planned first; each later path of the decomposition is
/// planned with already-assigned layers pinned, so free layers price their
/// shuffles against the fixed neighbours. A local-improvement sweep then
/// settles edges no path priced, and the result falls back to the best
/// uniform constant assignment whenever that is strictly cheaper — so the
/// returned cost never exceeds any uniform strategy from the candidate set.
pub fn plan_dag(
    g: &NetworkGraph,
    cands: &CandidateSet,
    m: &MachineModel,
    t: &CostTable,
    opts: &PlanOptions,
) -> Result<Strategy, PlanError> {
    check_candidate_set(g, cands)?;
    if g.is_line() {
        return plan_line(g, cands, m, t, opts);
    }
    let jcost = price_layers(g, cands, m, t, opts.interpolate)?;
    let weights: Vec<f64> = jcost
        .iter()
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();

    let mut assigned: Vec<Option<usize>> = vec![None; g.len()];
    for path in g.longest_path_decomposition(&weights) {
        let lists: Vec<Vec<usize>> = path
            .iter()
            .map(|&node| match assigned[node] {
                Some(c) => vec![c],
                None => (0..cands.per_layer[node].len()).collect(),
            })
            .collect();
        let picked = path_dp(&path, &lists, cands, &jcost, m)?;
        for (stage, &node) in path.iter().enumerate() {
            assigned[node] = Some(picked[stage]);
        }
    }
    let mut chosen: Vec<usize> =
        assigned.into_iter().map(|c| c.expect("path decomposition covers every layer")).collect();

    improvement_sweeps(g, cands, &jcost, m, &mut chosen)?;

    // Fall back to the best constant assignment when it beats the path
    // plan, or when the path plan alone busts the aggregate memory cap.
    let dists: Vec<LayerDistribution> =
        chosen.iter().enumerate().map(|(i, &c)| cands.per_layer[i][c].dist.clone()).collect();
    let planned_obj = network_cost(g, &dists, m, t, opts.interpolate)?.objective;
    let planned_fits = match opts.mem_cap_bytes {
        Some(cap) => memory_estimate(g, &dists, m.word_bytes)?
            .per_rank_total
            .iter()
            .all(|&b| b <= cap),
        None => true,
    };
    if let Some((uniform, uniform_obj)) = best_uniform(g, cands, m, t, opts)? {
        if uniform_obj < planned_obj || !planned_fits {
            chosen = uniform;
        }
    }

    finalize(g, cands, &chosen, m, t, opts)
}

// ---------------------------------------------------------------------------
