//! Analytic cost and memory model.
//!
//! Communication is priced with a two-level linear (alpha-beta) model:
//! sending n words costs `alpha + beta * word_bytes * n`, with separate
//! intra-node and inter-node parameter pairs. Local kernel runtimes come
//! from an empirical [`CostTable`] keyed by the exact local configuration —
//! the model predicts communication analytically but never guesses compute.
//!
//! A convolution layer under a given distribution costs, per pass:
//!
//! * forward: local kernel time plus, when an axis is split, two east/west
//!   halo messages of `O * n * c * h` words, two north/south messages of
//!   `O * n * c * w` words, and four corner messages of `O^2 * n * c` words
//!   (O is the kernel radius, lowercase letters are local block extents);
//!   terms for an undivided axis are omitted entirely, as is everything for
//!   O = 0;
//! * backward-data: the mirror-image halo exchange of the error signal plus
//!   the local kernel time;
//! * backward-weights: local kernel time, followed by an allreduce of the
//!   weight gradient over all ranks.
//!
//! Exposed (post-overlap) times assume ideal overlap of a halo exchange with
//! local compute (`max` of the pair): the forward halo hides under the
//! forward kernel, the backward-data halo under the backward-weights kernel.
//! Layers other than convolutions and fully-connected layers are treated as
//! free in *time*; their *bytes* (pooling halos, batch-norm allreduces) are
//! still accounted exactly, message for message, as the executor sends them,
//! so event logs and the model can be cross-checked byte for byte.

use std::collections::BTreeMap;
use std::fmt;

use crate::dist::{
    gradient_halo_spec, halo_spec, pool_halo_spec, shuffle_plan, DistError, LayerDistribution,
    LayerHalo, ShufflePlan,
};
use crate::kernels::{conv_bp_data, conv_bp_weights, conv_fp, Tensor4, Tile};
use crate::netgraph::{LayerKind, NetworkGraph, TensorShape, Window};

#[derive(Debug, thiserror::Error)]
pub enum PerfError {
    #[error("machine model line {line}: {msg}")]
    MachineParse { line: usize, msg: String },
    #[error("machine model field `{field}`: {msg}")]
    MachineField { field: &'static str, msg: String },
    #[error("cost table line {line}: {msg}")]
    CostParse { line: usize, msg: String },
    #[error("no cost table entry for {key}")]
    MissingCostEntry { key: CostKey },
    #[error(
        "no cost table entry comparable to {key} (same op/c/f/k/s/pad) to interpolate from"
    )]
    NoComparableEntry { key: CostKey },
    #[error("layer `{id}`: fully-connected layers support sample partitioning only")]
    SpatialFc { id: String },
    #[error(transparent)]
    Dist(#[from] DistError),
}

// ---------------------------------------------------------------------------
// Machine model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Locality {
    Intra,
    Inter,
}

/// The communication parameters of the target machine: `ranks` processors in
/// nodes of `node_size`, with distinct latency/bandwidth pairs for messages
/// inside and across nodes. A flat machine is the `node_size = ranks`
/// special case.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineModel {
    pub ranks: usize,
    pub node_size: usize,
    pub alpha_intra: f64,
    pub alpha_inter: f64,
    pub beta_intra: f64,
    pub beta_inter: f64,
    pub word_bytes: usize,
}

impl MachineModel {
    pub fn new(
        ranks: usize,
        node_size: usize,
        alpha_intra: f64,
        alpha_inter: f64,
        beta_intra: f64,
        beta_inter: f64,
        word_bytes: usize,
    ) -> Result<Self, PerfError> {
        let m = MachineModel {
            ranks,
            node_size,
            alpha_intra,
            alpha_inter,
            beta_intra,
            beta_inter,
            word_bytes,
        };
        m.validate()?;
        Ok(m)
    }

    /// Single-level model: every pair of ranks is "on node".
    pub fn flat(ranks: usize, alpha: f64, beta: f64, word_bytes: usize) -> Self {
        MachineModel {
            ranks,
            node_size: ranks.max(1),
            alpha_intra: alpha,
            alpha_inter: alpha,
            beta_intra: beta,
            beta_inter: beta,
            word_bytes,
        }
    }

    fn validate(&self) -> Result<(), PerfError> {
        fn positive(field: &'static str, v: usize) -> Result<(), PerfError> {
            if v == 0 {
                return Err(PerfError::MachineField { field, msg: "must be positive".into() });
            }
            Ok(())
        }
        fn non_negative(field: &'static str, v: f64) -> Result<(), PerfError> {
            if !v.is_finite() || v < 0.0 {
                return Err(PerfError::MachineField {
                    field,
                    msg: format!("must be a finite non-negative number, got {v}"),
                });
            }
            Ok(())
        }
        positive("ranks", self.ranks)?;
        positive("node_size", self.node_size)?;
        positive("word_bytes", self.word_bytes)?;
        non_negative("alpha_intra", self.alpha_intra)?;
        non_negative("alpha_inter", self.alpha_inter)?;
        non_negative("beta_intra", self.beta_intra)?;
        non_negative("beta_inter", self.beta_inter)?;
        if self.node_size < self.ranks && self.ranks % self.node_size != 0 {
            return Err(PerfError::MachineField {
                field: "node_size",
                msg: format!(
                    "{} ranks do not fill whole nodes of {}",
                    self.ranks, self.node_size
                ),
            });
        }
        Ok(())
    }

    pub fn alpha(&self, loc: Locality) -> f64 {
        match loc {
            Locality::Intra => self.alpha_intra,
            Locality::Inter => self.alpha_inter,
        }
    }

    pub fn beta(&self, loc: Locality) -> f64 {
        match loc {
            Locality::Intra => self.beta_intra,
            Locality::Inter => self.beta_inter,
        }
    }

    /// Ranks are packed into nodes in id order.
    pub fn same_node(&self, a: usize, b: usize) -> bool {
        a / self.node_size == b / self.node_size
    }

    pub fn pair_locality(&self, a: usize, b: usize) -> Locality {
        if self.same_node(a, b) {
            Locality::Intra
        } else {
            Locality::Inter
        }
    }

    /// Parses the `key = value` text format. Required keys: `ranks`,
    /// `node_size`, `alpha_intra`, `alpha_inter`, `beta_intra`,
    /// `beta_inter`, `word_bytes`. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, PerfError> {
        let mut fields: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| PerfError::MachineParse {
                line: no + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if fields.insert(key, (no + 1, value)).is_some() {
                return Err(PerfError::MachineParse {
                    line: no + 1,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }

        fn take_usize(
            fields: &BTreeMap<&str, (usize, &str)>,
            key: &'static str,
        ) -> Result<usize, PerfError> {
            let (line, v) = fields
                .get(key)
                .ok_or(PerfError::MachineField { field: key, msg: "missing".into() })?;
            v.parse().map_err(|e| PerfError::MachineParse {
                line: *line,
                msg: format!("bad integer for `{key}`: {e}"),
            })
        }
        fn take_f64(
            fields: &BTreeMap<&str, (usize, &str)>,
            key: &'static str,
        ) -> Result<f64, PerfError> {
            let (line, v) = fields
                .get(key)
                .ok_or(PerfError::MachineField { field: key, msg: "missing".into() })?;
            v.parse().map_err(|e| PerfError::MachineParse {
                line: *line,
                msg: format!("bad number for `{key}`: {e}"),
            })
        }

        let known = [
            "ranks",
            "node_size",
            "alpha_intra",
            "alpha_inter",
            "beta_intra",
            "beta_inter",
            "word_bytes",
        ];
        for (key, (line, _)) in &fields {
            if !known.contains(key) {
                return Err(PerfError::MachineParse {
                    line: *line,
                    msg: format!("unknown key `{key}`"),
                });
            }
        }

        MachineModel::new(
            take_usize(&fields, "ranks")?,
            take_usize(&fields, "node_size")?,
            take_f64(&fields, "alpha_intra")?,
            take_f64(&fields, "alpha_inter")?,
            take_f64(&fields, "beta_intra")?,
            take_f64(&fields, "beta_inter")?,
            take_usize(&fields, "word_bytes")?,
        )
    }

    pub fn render(&self) -> String {
        format!(
            "ranks = {}\nnode_size = {}\nalpha_intra = {:e}\nalpha_inter = {:e}\n\
             beta_intra = {:e}\nbeta_inter = {:e}\nword_bytes = {}\n",
            self.ranks,
            self.node_size,
            self.alpha_intra,
            self.alpha_inter,
            self.beta_intra,
            self.beta_inter,
            self.word_bytes
        )
    }
}

// ---------------------------------------------------------------------------
// Cost table
// ---------------------------------------------------------------------------

/// Which kernel an empirical timing describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum KernelOp {
    Fp,
    BpData,
    BpFilter,
}

impl KernelOp {
    pub const ALL: [KernelOp; 3] = [KernelOp::Fp, KernelOp::BpData, KernelOp::BpFilter];

    pub fn as_str(self) -> &'static str {
        match self {
            KernelOp::Fp => "fp",
            KernelOp::BpData => "bp-data",
            KernelOp::BpFilter => "bp-filter",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        match s {
            "fp" => Some(KernelOp::Fp),
            "bp-data" => Some(KernelOp::BpData),
            "bp-filter" => Some(KernelOp::BpFilter),
            _ => None,
        }
    }
}

/// Exact lookup key: local input block (n, c, h, w), filter count f, and the
/// window parameters. Fully-connected layers use h = w = 1, k = 0 with
/// c/f as the input/output feature counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CostKey {
    pub op: KernelOp,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub s: usize,
    pub pad: usize,
}

impl fmt::Display for CostKey {
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            out,
            "op={},n={},c={},h={},w={},f={},k={},s={},pad={}",
            self.op.as_str(),
            self.n,
            self.c,
            self.h,
            self.w,
            self.f,
            self.k,
            self.s,
            self.pad
        )
    }
}

pub const COST_TABLE_HEADER: &str = "op,n,c,h,w,f,k,s,pad,seconds";

/// Empirical kernel timings with exact-key lookup. An optional volume-scaled
/// fallback serves planning over unmeasured block sizes; it is an
/// approximation and must be requested explicitly.
#[derive(Debug, Clone, Default)]
pub struct CostTable {
    entries: BTreeMap<CostKey, f64>,
}

impl CostTable {
    pub fn new() -> Self {
        CostTable::default()
    }

    pub fn insert(&mut self, key: CostKey, seconds: f64) {
        self.entries.insert(key, seconds);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &CostKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn lookup(&self, key: &CostKey) -> Result<f64, PerfError> {
        self.entries
            .get(key)
            .copied()
            .ok_or(PerfError::MissingCostEntry { key: *key })
    }

    /// Exact lookup, falling back to the nearest entry with the same
    /// (op, c, f, k, s, pad) in log-space over (n, h, w), linearly scaled by
    /// the element-volume ratio.
    pub fn lookup_scaled(&self, key: &CostKey) -> Result<f64, PerfError> {
        if let Some(t) = self.entries.get(key) {
            return Ok(*t);
        }
        let mut best: Option<(f64, &CostKey, f64)> = None;
        for (k, t) in &self.entries {
            if (k.op, k.c, k.f, k.k, k.s, k.pad) != (key.op, key.c, key.f, key.k, key.s, key.pad) {
                continue;
            }
            let dist = |a: usize, b: usize| ((a as f64).ln() - (b as f64).ln()).abs();
            let d = dist(key.n, k.n) + dist(key.h, k.h) + dist(key.w, k.w);
            if best.map_or(true, |(bd, _, _)| d < bd) {
                best = Some((d, k, *t));
            }
        }
        let (_, near, t) = best.ok_or(PerfError::NoComparableEntry { key: *key })?;
        let volume = |k: &CostKey| (k.n * k.h * k.w) as f64;
        Ok(t * volume(key) / volume(near))
    }

    fn get(&self, key: &CostKey, interpolate: bool) -> Result<f64, PerfError> {
        if interpolate {
            self.lookup_scaled(key)
        } else {
            self.lookup(key)
        }
    }

    pub fn parse_csv(text: &str) -> Result<Self, PerfError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(PerfError::CostParse {
            line: 1,
            msg: "empty file".into(),
        })?;
        if header.trim() != COST_TABLE_HEADER {
            return Err(PerfError::CostParse {
                line: 1,
                msg: format!("expected header `{COST_TABLE_HEADER}`, got `{}`", header.trim()),
            });
        }
        let mut table = CostTable::new();
        for (no, raw) in lines {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 10 {
                return Err(PerfError::CostParse {
                    line: no + 1,
                    msg: format!("expected 10 fields, got {}", parts.len()),
                });
            }
            let op = KernelOp::from_str(parts[0]).ok_or_else(|| PerfError::CostParse {
                line: no + 1,
                msg: format!("unknown op `{}`", parts[0]),
            })?;
            let mut ints = [0usize; 8];
            for (slot, raw) in ints.iter_mut().zip(&parts[1..9]) {
                *slot = raw.parse().map_err(|e| PerfError::CostParse {
                    line: no + 1,
                    msg: format!("bad integer `{raw}`: {e}"),
                })?;
            }
            let seconds: f64 = parts[9].parse().map_err(|e| PerfError::CostParse {
                line: no + 1,
                msg: format!("bad seconds `{}`: {e}", parts[9]),
            })?;
            if !(seconds > 0.0) {
                return Err(PerfError::CostParse {
                    line: no + 1,
                    msg: format!("seconds must be positive, got {seconds}"),
                });
            }
            let [n, c, h, w, f, k, s, pad] = ints;
            table.insert(CostKey { op, n, c, h, w, f, k, s, pad }, seconds);
        }
        Ok(table)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(COST_TABLE_HEADER);
        out.push('\n');
        for (k, t) in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{:e}\n",
                k.op.as_str(),
                k.n,
                k.c,
                k.h,
                k.w,
                k.f,
                k.k,
                k.s,
                k.pad,
                t
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Communication primitives
// ---------------------------------------------------------------------------

/// Time to send and receive `words` between two ranks: `alpha + beta * bytes`.
/// An empty message still pays the latency.
pub fn sr_cost(m: &MachineModel, words: u64, loc: Locality) -> f64 {
    m.alpha(loc) + m.beta(loc) * (m.word_bytes as u64 * words) as f64
}

/// Time for an allreduce of `words` over `p` ranks: zero for one rank,
/// otherwise the cheaper of recursive doubling, `ceil(log2 p) * (alpha +
/// n * beta')`, and a bandwidth-optimal ring, `2(p-1) * alpha +
/// 2((p-1)/p) * n * beta'`, with `beta' = beta * word_bytes`.
pub fn ar_cost(m: &MachineModel, p: usize, words: u64, loc: Locality) -> f64 {
    if p <= 1 {
        return 0.0;
    }
    let alpha = m.alpha(loc);
    let bytes_per_word = m.word_bytes as f64;
    let beta_w = m.beta(loc) * bytes_per_word;
    let n = words as f64;
    let rounds = (p as f64).log2().ceil();
    let doubling = rounds * (alpha + n * beta_w);
    let pf = p as f64;
    let ring = 2.0 * (pf - 1.0) * alpha + 2.0 * ((pf - 1.0) / pf) * n * beta_w;
    doubling.min(ring)
}

/// Prices a redistribution as a pairwise exchange: the busiest rank's sum of
/// per-peer send costs, with per-pair locality. Empty plans are free.
pub fn shuffle_cost(plan: &ShufflePlan, m: &MachineModel) -> f64 {
    if plan.is_empty() {
        return 0.0;
    }
    let ranks = plan
        .transfers
        .iter()
        .map(|t| t.src.max(t.dst) + 1)
        .max()
        .unwrap_or(0);
    let mut per_rank = vec![0.0; ranks];
    for t in &plan.transfers {
        let words = t.span.elements() * plan.channels as u64;
        per_rank[t.src] += sr_cost(m, words, m.pair_locality(t.src, t.dst));
    }
    per_rank.into_iter().fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Per-layer cost
// ---------------------------------------------------------------------------

/// Cost of one layer under one distribution. Times follow the analytic
/// model (worst-rank, serialized halo messages); byte counts are the exact
/// executor traffic summed over all ranks — receives for halos, and the
/// flat reduce-plus-broadcast volume `2 (group-1) * words` for allreduces —
/// so an event log can be reconciled against them exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerCost {
    pub fp_compute: f64,
    pub bp_data_compute: f64,
    pub bp_weights_compute: f64,
    pub fp_halo_time: f64,
    pub bp_halo_time: f64,
    pub bp_allreduce_time: f64,
    pub exposed_fp: f64,
    pub exposed_bp: f64,
    pub halo_fwd_bytes: u64,
    pub halo_bwd_bytes: u64,
    pub allreduce_bytes: u64,
}

impl LayerCost {
    /// Non-overlapped sum of every component.
    pub fn raw_total(&self) -> f64 {
        self.fp_compute
            + self.bp_data_compute
            + self.bp_weights_compute
            + self.fp_halo_time
            + self.bp_halo_time
            + self.bp_allreduce_time
    }

    /// The decomposable planning objective for this layer: overlapped
    /// forward and backward plus the full allreduce.
    pub fn objective(&self) -> f64 {
        self.exposed_fp + self.exposed_bp + self.bp_allreduce_time
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Flat reduce-then-broadcast wire volume for one allreduce, matching the
/// executor: `2 * (group - 1) * words`.
fn flat_allreduce_bytes(group: usize, words: u64, word_bytes: usize) -> u64 {
    if group <= 1 {
        return 0;
    }
    2 * (group as u64 - 1) * words * word_bytes as u64
}

/// Halo locality at the model level: all spatial neighbours are on-node
/// exactly when spatial groups align with node boundaries.
fn halo_locality(m: &MachineModel, d: &LayerDistribution) -> Locality {
    let group = d.grid.h_parts * d.grid.w_parts;
    if group <= m.node_size && m.node_size % group == 0 {
        Locality::Intra
    } else {
        Locality::Inter
    }
}

fn collective_locality(m: &MachineModel, group: usize) -> Locality {
    if group > m.node_size {
        Locality::Inter
    } else {
        Locality::Intra
    }
}

/// Serialized per-rank halo message time for one direction of one windowed
/// layer: two east/west slabs, two north/south slabs, four corners, each
/// term omitted when its axis is undivided or the radius is zero.
fn halo_formula_time(
    m: &MachineModel,
    d: &LayerDistribution,
    radius: usize,
    n_loc: usize,
    c: usize,
    h_loc: usize,
    w_loc: usize,
) -> f64 {
    if radius == 0 {
        return 0.0;
    }
    let loc = halo_locality(m, d);
    let (o, n, c) = (radius as u64, n_loc as u64, c as u64);
    let mut t = 0.0;
    let split_w = d.grid.w_parts > 1;
    let split_h = d.grid.h_parts > 1;
    if split_w {
        t += 2.0 * sr_cost(m, o * n * c * h_loc as u64, loc);
    }
    if split_h {
        t += 2.0 * sr_cost(m, o * n * c * w_loc as u64, loc);
    }
    if split_w && split_h {
        t += 4.0 * sr_cost(m, o * o * n * c, loc);
    }
    t
}

/// The cost-table keys a layer needs under a distribution, in
/// `[fp, bp-data, bp-filter]` order: the ceiling local block of the input
/// with the layer's window parameters. Empty for layers the model treats as
/// free. Rejects spatial splits of fully-connected layers, whose features
/// have no spatial meaning.
pub fn cost_keys(
    g: &NetworkGraph,
    idx: usize,
    d: &LayerDistribution,
) -> Result<Vec<CostKey>, PerfError> {
    let layer = g.layer(idx);
    let input = g.shapes(idx).input;
    let ops = [KernelOp::Fp, KernelOp::BpData, KernelOp::BpFilter];
    match &layer.kind {
        LayerKind::Conv(p) => {
            let n_loc = ceil_div(input.n, d.grid.n_parts);
            let h_loc = ceil_div(input.h, d.grid.h_parts);
            let w_loc = ceil_div(input.w, d.grid.w_parts);
            Ok(ops
                .iter()
                .map(|&op| CostKey {
                    op,
                    n: n_loc,
                    c: input.c,
                    h: h_loc,
                    w: w_loc,
                    f: p.filters,
                    k: p.kernel,
                    s: p.stride,
                    pad: p.padding,
                })
                .collect())
        }
        LayerKind::FullyConnected { features } => {
            if d.grid.h_parts != 1 || d.grid.w_parts != 1 {
                return Err(PerfError::SpatialFc { id: layer.id.clone() });
            }
            let in_features = input.c * input.h * input.w;
            let n_loc = ceil_div(input.n, d.grid.n_parts);
            Ok(ops
                .iter()
                .map(|&op| CostKey {
                    op,
                    n: n_loc,
                    c: in_features,
                    h: 1,
                    w: 1,
                    f: *features,
                    k: 0,
                    s: 1,
                    pad: 0,
                })
                .collect())
        }
        _ => Ok(Vec::new()),
    }
}

/// Prices one layer under one distribution. See the module docs for the
/// formula; `interpolate` enables volume-scaled cost-table fallback.
pub fn layer_cost(
    g: &NetworkGraph,
    idx: usize,
    d: &LayerDistribution,
    m: &MachineModel,
    t: &CostTable,
    interpolate: bool,
) -> Result<LayerCost, PerfError> {
    let layer = g.layer(idx);
    let shapes = g.shapes(idx);
    let ranks = d.ranks();
    let mut cost = LayerCost::default();

    match &layer.kind {
        LayerKind::Conv(p) => {
            let win = p.window();
            let radius = p.radius();
            let input = shapes.input;
            let n_loc = ceil_div(input.n, d.grid.n_parts);
            let h_loc = ceil_div(input.h, d.grid.h_parts);
            let w_loc = ceil_div(input.w, d.grid.w_parts);
            let keys = cost_keys(g, idx, d)?;
            cost.fp_compute = t.get(&keys[0], interpolate)?;
            cost.bp_data_compute = t.get(&keys[1], interpolate)?;
            cost.bp_weights_compute = t.get(&keys[2], interpolate)?;

            cost.fp_halo_time = halo_formula_time(m, d, radius, n_loc, input.c, h_loc, w_loc);
            cost.bp_halo_time = cost.fp_halo_time;
            cost.exposed_fp = cost.fp_compute.max(cost.fp_halo_time);
            cost.exposed_bp =
                cost.bp_data_compute + cost.bp_weights_compute.max(cost.bp_halo_time);

            let weight_words = (p.filters * input.c * p.kernel * p.kernel) as u64;
            cost.bp_allreduce_time =
                ar_cost(m, ranks, weight_words, collective_locality(m, ranks));
            cost.allreduce_bytes = flat_allreduce_bytes(ranks, weight_words, m.word_bytes);

            cost.halo_fwd_bytes =
                halo_spec(d, win)?.total_recv_elements(input.c) * m.word_bytes as u64;
            cost.halo_bwd_bytes = gradient_halo_spec(d, win)?
                .total_recv_elements(shapes.output.c)
                * m.word_bytes as u64;
        }
        LayerKind::FullyConnected { features } => {
            let input = shapes.input;
            let in_features = input.c * input.h * input.w;
            let keys = cost_keys(g, idx, d)?;
            cost.fp_compute = t.get(&keys[0], interpolate)?;
            cost.bp_data_compute = t.get(&keys[1], interpolate)?;
            cost.bp_weights_compute = t.get(&keys[2], interpolate)?;
            cost.exposed_fp = cost.fp_compute;
            cost.exposed_bp = cost.bp_data_compute + cost.bp_weights_compute;
            let weight_words = (in_features * features) as u64;
            cost.bp_allreduce_time =
                ar_cost(m, ranks, weight_words, collective_locality(m, ranks));
            cost.allreduce_bytes = flat_allreduce_bytes(ranks, weight_words, m.word_bytes);
        }
        LayerKind::Pool(p) => {
            // Free in time; halo bytes counted exactly (the forward tile is
            // widened for max-pool backward, hence the dedicated spec).
            let win = p.window_spec();
            cost.halo_fwd_bytes =
                pool_halo_spec(d, win)?.total_recv_elements(shapes.input.c) * m.word_bytes as u64;
            cost.halo_bwd_bytes = gradient_halo_spec(d, win)?
                .total_recv_elements(shapes.output.c)
                * m.word_bytes as u64;
        }
        LayerKind::BatchNormSpatial => {
            // Free in time. Bytes: per-sample statistics are combined within
            // each spatial group (forward moments, backward group sums), and
            // the parameter gradients over all ranks.
            let c = shapes.input.c;
            let spatial_group = d.grid.h_parts * d.grid.w_parts;
            let mut stats = 0u64;
            for part in 0..d.grid.n_parts {
                let samples = blocked_len(shapes.input.n, d.grid.n_parts, part) as u64;
                let words = 2 * c as u64 * samples;
                stats += flat_allreduce_bytes(spatial_group, words, m.word_bytes);
            }
            let param = flat_allreduce_bytes(ranks, 2 * c as u64, m.word_bytes);
            cost.allreduce_bytes = 2 * stats + param;
        }
        LayerKind::BatchNormLocal => {
            // Shard-local statistics need no communication; only the
            // parameter gradients are combined.
            let c = shapes.input.c;
            cost.allreduce_bytes = flat_allreduce_bytes(ranks, 2 * c as u64, m.word_bytes);
        }
        LayerKind::Input(_) | LayerKind::Relu | LayerKind::Output => {}
    }

    Ok(cost)
}

/// Length of block `part` when `extent` is split into near-equal blocks.
fn blocked_len(extent: usize, parts: usize, part: usize) -> usize {
    let base = extent / parts;
    let rem = extent % parts;
    base + usize::from(part < rem)
}

// ---------------------------------------------------------------------------
// Whole-network cost
// ---------------------------------------------------------------------------

/// One graph edge's redistribution costs: the forward move of the parent's
/// output and the backward move of the child's error signal.
#[derive(Debug, Clone)]
pub struct EdgeCost {
    pub from: usize,
    pub to: usize,
    pub fwd_seconds: f64,
    pub bwd_seconds: f64,
    pub fwd_bytes: u64,
    pub bwd_bytes: u64,
}

/// Network-level prediction: a forward sweep, then a backward timeline in
/// reverse topological order with each layer's weight-gradient allreduce
/// greedily overlapped behind later backward compute, one allreduce in
/// flight at a time.
#[derive(Debug, Clone)]
pub struct NetworkCost {
    pub layers: Vec<LayerCost>,
    pub edges: Vec<EdgeCost>,
    pub fp_time: f64,
    pub bp_time: f64,
    /// Allreduce time left exposed past the end of backward compute.
    pub exposed_allreduce: f64,
    pub total: f64,
    /// The decomposable planning objective: per-layer objectives plus every
    /// edge's two shuffles, with no cross-layer allreduce overlap.
    pub objective: f64,
}

/// Builds the two shuffle plans of an edge (forward data, backward error
/// signal). Empty when the distributions agree.
pub fn edge_shuffles(
    parent: &LayerDistribution,
    child: &LayerDistribution,
) -> Result<(ShufflePlan, ShufflePlan), PerfError> {
    let fwd = shuffle_plan(&parent.out_ownership(), &child.in_ownership())?;
    let bwd = shuffle_plan(&child.in_ownership(), &parent.out_ownership())?;
    Ok((fwd, bwd))
}

pub fn network_cost(
    g: &NetworkGraph,
    dists: &[LayerDistribution],
    m: &MachineModel,
    t: &CostTable,
    interpolate: bool,
) -> Result<NetworkCost, PerfError> {
    assert_eq!(dists.len(), g.len(), "one distribution per layer");

    let mut layers = Vec::with_capacity(g.len());
    for idx in 0..g.len() {
        layers.push(layer_cost(g, idx, &dists[idx], m, t, interpolate)?);
    }

    let mut edges = Vec::new();
    for parent in 0..g.len() {
        for &child in g.children(parent) {
            let (fwd, bwd) = edge_shuffles(&dists[parent], &dists[child])?;
            edges.push(EdgeCost {
                from: parent,
                to: child,
                fwd_seconds: shuffle_cost(&fwd, m),
                bwd_seconds: shuffle_cost(&bwd, m),
                fwd_bytes: fwd.moved_elements() * m.word_bytes as u64,
                bwd_bytes: bwd.moved_elements() * m.word_bytes as u64,
            });
        }
    }

    let fp_time: f64 = layers.iter().map(|c| c.exposed_fp).sum::<f64>()
        + edges.iter().map(|e| e.fwd_seconds).sum::<f64>();

    // Backward timeline. Layers run in reverse topological order; an edge's
    // backward shuffle precedes the parent layer's compute. Allreduces
    // become ready when their layer's backward compute ends and run on a
    // single channel in ready order.
    let mut bwd_shuffle_into = vec![0.0; g.len()];
    for e in &edges {
        bwd_shuffle_into[e.from] += e.bwd_seconds;
    }
    let mut now = 0.0f64;
    let mut channel_free = 0.0f64;
    for idx in (0..g.len()).rev() {
        now += bwd_shuffle_into[idx];
        now += layers[idx].exposed_bp;
        let ar = layers[idx].bp_allreduce_time;
        if ar > 0.0 {
            let start = now.max(channel_free);
            channel_free = start + ar;
        }
    }
    let bp_time = now.max(channel_free);
    let exposed_allreduce = bp_time - now;

    let objective = layers.iter().map(|c| c.objective()).sum::<f64>()
        + edges.iter().map(|e| e.fwd_seconds + e.bwd_seconds).sum::<f64>();

    Ok(NetworkCost {
        layers,
        edges,
        fp_time,
        bp_time,
        exposed_allreduce,
        total: fp_time + bp_time,
        objective,
    })
}

// ---------------------------------------------------------------------------
// Memory
// ---------------------------------------------------------------------------

/// Worst-rank bytes for one layer, by category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerMemory {
    pub activations: u64,
    pub error_signals: u64,
    pub weights: u64,
    pub weight_grads: u64,
    pub halo_buffers: u64,
}

impl LayerMemory {
    pub fn total(&self) -> u64 {
        self.activations + self.error_signals + self.weights + self.weight_grads
            + self.halo_buffers
    }
}

/// Per-rank memory estimate at `word_bytes` per element. `per_layer` holds
/// each layer's worst rank; `total_bytes` is the worst rank's whole-network
/// sum (the two maxima may sit on different ranks).
#[derive(Debug, Clone)]
pub struct MemoryEstimate {
    pub per_layer: Vec<LayerMemory>,
    pub per_rank_total: Vec<u64>,
    pub total_bytes: u64,
}

fn weight_words(kind: &LayerKind, input: TensorShape) -> u64 {
    match kind {
        LayerKind::Conv(p) => (p.filters * input.c * p.kernel * p.kernel) as u64,
        LayerKind::BatchNormLocal | LayerKind::BatchNormSpatial => 2 * input.c as u64,
        LayerKind::FullyConnected { features } => {
            (input.c * input.h * input.w * features) as u64
        }
        _ => 0,
    }
}

fn layer_halos(
    kind: &LayerKind,
    d: &LayerDistribution,
) -> Result<Option<(LayerHalo, LayerHalo)>, PerfError> {
    let win = match kind.window() {
        Some(w) => w,
        None => return Ok(None),
    };
    let fwd = match kind {
        LayerKind::Pool(_) => pool_halo_spec(d, win)?,
        _ => halo_spec(d, win)?,
    };
    let bwd = gradient_halo_spec(d, win)?;
    Ok(Some((fwd, bwd)))
}

/// Estimates per-rank memory: every layer stores its local input and output
/// shards (and their error signals), replicated weights and weight
/// gradients, and halo receive buffers. The input layer stores only its
/// output (the data itself) and the matching error signal.
pub fn memory_estimate(
    g: &NetworkGraph,
    dists: &[LayerDistribution],
    word_bytes: usize,
) -> Result<MemoryEstimate, PerfError> {
    assert_eq!(dists.len(), g.len(), "one distribution per layer");
    let ranks = dists.iter().map(LayerDistribution::ranks).max().unwrap_or(1);

    let mut per_layer = vec![LayerMemory::default(); g.len()];
    let mut per_rank_total = vec![0u64; ranks];

    for idx in 0..g.len() {
        let (worst, totals) = layer_memory(g, idx, &dists[idx], word_bytes)?;
        for (rank, bytes) in totals.iter().enumerate() {
            per_rank_total[rank] += bytes;
        }
        per_layer[idx] = worst;
    }

    let total_bytes = per_rank_total.iter().copied().max().unwrap_or(0);
    Ok(MemoryEstimate { per_layer, per_rank_total, total_bytes })
}

/// One layer's memory under one distribution: the worst rank by category
/// and every rank's byte total. The worst-rank total bounds what this layer
/// alone contributes to any rank, so a planner can reject a candidate whose
/// single layer already exceeds a memory cap.
pub fn layer_memory(
    g: &NetworkGraph,
    idx: usize,
    d: &LayerDistribution,
    word_bytes: usize,
) -> Result<(LayerMemory, Vec<u64>), PerfError> {
    let word = word_bytes as u64;
    let layer = g.layer(idx);
    let shapes = g.shapes(idx);
    let halos = layer_halos(&layer.kind, d)?;
    let wwords = weight_words(&layer.kind, shapes.input);
    let weights = wwords * word;

    let mut worst = LayerMemory::default();
    let mut totals = Vec::with_capacity(d.ranks());
    for rank in 0..d.ranks() {
        let own_out = d.owned_out(rank)?.elements() * shapes.output.c as u64;
        let own_in = if matches!(layer.kind, LayerKind::Input(_)) {
            0
        } else {
            d.owned_in(rank)?.elements() * shapes.input.c as u64
        };
        let act = (own_in + own_out) * word;
        let halo = match &halos {
            Some((fwd, bwd)) => {
                (fwd.ranks[rank].recv_elements(shapes.input.c)
                    + bwd.ranks[rank].recv_elements(shapes.output.c))
                    * word
            }
            None => 0,
        };
        let mem = LayerMemory {
            activations: act,
            error_signals: act,
            weights,
            weight_grads: weights,
            halo_buffers: halo,
        };
        totals.push(mem.total());
        worst.activations = worst.activations.max(mem.activations);
        worst.error_signals = worst.error_signals.max(mem.error_signals);
        worst.weights = worst.weights.max(mem.weights);
        worst.weight_grads = worst.weight_grads.max(mem.weight_grads);
        worst.halo_buffers = worst.halo_buffers.max(mem.halo_buffers);
    }
    Ok((worst, totals))
}

// ---------------------------------------------------------------------------
// Benchmarking
// ---------------------------------------------------------------------------

/// One configuration to time: a local input block and window parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub s: usize,
    pub pad: usize,
}

pub const BENCH_SHAPES_HEADER: &str = "n,c,h,w,f,k,s,pad";

/// Parses a CSV of benchmark shapes (header `n,c,h,w,f,k,s,pad`).
pub fn parse_bench_shapes(text: &str) -> Result<Vec<BenchShape>, PerfError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or(PerfError::CostParse { line: 1, msg: "empty file".into() })?;
    if header.trim() != BENCH_SHAPES_HEADER {
        return Err(PerfError::CostParse {
            line: 1,
            msg: format!("expected header `{BENCH_SHAPES_HEADER}`, got `{}`", header.trim()),
        });
    }
    let mut shapes = Vec::new();
    for (no, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 8 {
            return Err(PerfError::CostParse {
                line: no + 1,
                msg: format!("expected 8 fields, got {}", parts.len()),
            });
        }
        let mut ints = [0usize; 8];
        for (slot, raw) in ints.iter_mut().zip(&parts) {
            *slot = raw.parse().map_err(|e| PerfError::CostParse {
                line: no + 1,
                msg: format!("bad integer `{raw}`: {e}"),
            })?;
        }
        let [n, c, h, w, f, k, s, pad] = ints;
        shapes.push(BenchShape { n, c, h, w, f, k, s, pad });
    }
    Ok(shapes)
}

/// Times the reference convolution kernels for each shape: three warmup
/// runs, then the mean of `repetitions` timed runs per operation.
pub fn benchgen(shapes: &[BenchShape], repetitions: usize) -> CostTable {
    let reps = repetitions.max(1);
    let mut table = CostTable::new();
    for (i, sh) in shapes.iter().enumerate() {
        let win = Window { size: sh.k, stride: sh.s, padding: sh.pad };
        let in_shape = TensorShape::new(sh.n, sh.c, sh.h, sh.w);
        let out_shape =
            TensorShape::new(sh.n, sh.f, win.out_extent(sh.h), win.out_extent(sh.w));
        let wshape = TensorShape::new(sh.f, sh.c, sh.k, sh.k);

        let x = deterministic_tile(in_shape, 1000 + i as u64);
        let dy = deterministic_tile(out_shape, 2000 + i as u64);
        let weights = {
            let t = deterministic_tile(wshape, 3000 + i as u64);
            Tensor4 { shape: wshape, data: t.data().to_vec() }
        };
        let out_box = crate::dist::Box3 {
            n: 0..out_shape.n,
            h: 0..out_shape.h,
            w: 0..out_shape.w,
        };
        let in_box = crate::dist::Box3 { n: 0..in_shape.n, h: 0..in_shape.h, w: 0..in_shape.w };

        for op in KernelOp::ALL {
            let run = || match op {
                KernelOp::Fp => {
                    let mut y = Tile::full(out_shape);
                    conv_fp(&x, &weights, win, &out_box, &mut y);
                    y.data()[0]
                }
                KernelOp::BpData => {
                    let mut dx = Tile::full(in_shape);
                    conv_bp_data(&dy, &weights, win, &in_box, &mut dx);
                    dx.data()[0]
                }
                KernelOp::BpFilter => {
                    let mut dw = Tensor4::zeros(wshape);
                    conv_bp_weights(&x, &dy, win, &out_box, &mut dw);
                    dw.data[0]
                }
            };
            let mut sink = 0.0;
            for _ in 0..3 {
                sink += run();
            }
            let start = std::time::Instant::now();
            for _ in 0..reps {
                sink += run();
            }
            let mean = start.elapsed().as_secs_f64() / reps as f64;
            // Touch the accumulator so the runs cannot be optimized away.
            let seconds = if sink.is_nan() { mean } else { mean.max(1e-12) };
            table.insert(
                CostKey {
                    op,
                    n: sh.n,
                    c: sh.c,
                    h: sh.h,
                    w: sh.w,
                    f: sh.f,
                    k: sh.k,
                    s: sh.s,
                    pad: sh.pad,
                },
                seconds,
            );
        }
    }
    table
}

fn deterministic_tile(shape: TensorShape, seed: u64) -> Tile {
    let mut t = Tile::full(shape);
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
    for v in t.data_mut() {
        state ^= state >> 12;
        state ^= state << 25;
        state ^= state >> 27;
        let r = state.wrapping_mul(0x2545_f491_4f6c_dd1d);
        *v = (r >> 11) as f64 / (1u64 << 52) as f64 - 1.0;
    }
    t
}

// ---------------------------------------------------------------------------
