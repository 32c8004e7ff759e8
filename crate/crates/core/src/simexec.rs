//! Deterministic virtual-rank executor.
//!
//! Runs one training step — forward, backward, and the weight-gradient
//! allreduce — of a network under a per-layer distribution, holding every
//! rank's tensor shards as private state and routing all cross-rank data
//! through an explicit mailbox. The executor is not fast and does not
//! pretend to be; its job is evidence. Because a rank can only see remote
//! values that arrived as messages, agreement with the serial reference
//! proves the halo and shuffle index sets deliver exactly the values the
//! computation needs.
//!
//! Determinism: ranks are visited in id order, collectives reduce in rank
//! order, and delivery is FIFO per (source, destination, tag) channel, so
//! repeated runs produce identical numerics and identical event logs.
//!
//! Layers with several parents consume the element-wise sum of their
//! parents' outputs (the usual residual join); in backward, each parent
//! edge carries the same error signal back. A layer whose distribution
//! differs from its parent's triggers a shuffle on that edge, in both
//! directions.
//!
//! The backward convolution keeps two views of the error signal: the owned
//! block only, used for the weight gradient, and a halo-widened tile used
//! for the data gradient. The weight gradient never reads halo data — the
//! two exchanges are independent, which is what lets a real implementation
//! overlap the error-signal exchange with the weight-gradient kernel.

use std::collections::{BTreeMap, VecDeque};

use crate::dist::{
    gradient_halo_spec, halo_spec, pool_halo_spec, shuffle_plan, Box3, DistError, HaloDir,
    LayerDistribution, LayerHalo, Ownership, ShufflePlan,
};
use crate::kernels::{
    bn_backward_data, bn_backward_sums, bn_normalize, bn_param_grads, channel_sums, conv_bp_data,
    conv_bp_weights, conv_fp, pool_bp, pool_fp, relu_bp, relu_fp, sample_channel_sums,
    stats_from_sums, Tensor4, Tile,
};
use crate::netgraph::{LayerKind, NetworkGraph, TensorShape};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("expected {expected} layer distributions, got {got}")]
    DistributionCount { expected: usize, got: usize },
    #[error("layer `{layer}` runs on {got} ranks but the strategy uses {expected}")]
    MixedRankCounts { layer: String, expected: usize, got: usize },
    #[error("layer `{layer}`: distribution was built for different tensor shapes")]
    DistributionShape { layer: String },
    #[error("layer `{layer}`: fully-connected layers are priced but not executed")]
    FullyConnected { layer: String },
    #[error("the executor needs exactly one input layer, found {0}")]
    NotSingleSource(usize),
    #[error("the executor needs exactly one sink layer, found {0}")]
    NotSingleSink(usize),
    #[error("layer `{layer}`: rank {rank} owns an empty block under this distribution")]
    EmptyBlock { layer: String, rank: usize },
    #[error("{what}: expected shape {expected}, got {got}")]
    ShapeMismatch { what: String, expected: TensorShape, got: TensorShape },
    #[error("missing parameters for layer `{0}`")]
    MissingParam(String),
    #[error("allreduce for `{layer}`: members contributed different payload lengths")]
    PayloadMismatch { layer: String },
    #[error("gather: shard {rank} does not match the distribution's block")]
    BadShard { rank: usize },
    #[error(transparent)]
    Dist(#[from] DistError),
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Scale and shift of one batch-norm layer, stored as (1, C, 1, 1) tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor4,
    pub beta: Tensor4,
}

/// All trainable state of a network, replicated on every rank: convolution
/// filter banks (F, C, K, K) and batch-norm scale/shift pairs, keyed by
/// layer id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    pub conv: BTreeMap<String, Tensor4>,
    pub bn: BTreeMap<String, BnParams>,
}

impl Params {
    pub fn validate(&self, g: &NetworkGraph) -> Result<(), SimError> {
        for idx in 0..g.len() {
            let layer = g.layer(idx);
            let input = g.shapes(idx).input;
            match &layer.kind {
                LayerKind::Conv(p) => {
                    let w = self
                        .conv
                        .get(&layer.id)
                        .ok_or_else(|| SimError::MissingParam(layer.id.clone()))?;
                    let expected = TensorShape::new(p.filters, input.c, p.kernel, p.kernel);
                    if w.shape != expected {
                        return Err(SimError::ShapeMismatch {
                            what: format!("weights of `{}`", layer.id),
                            expected,
                            got: w.shape,
                        });
                    }
                }
                LayerKind::BatchNormLocal | LayerKind::BatchNormSpatial => {
                    let p = self
                        .bn
                        .get(&layer.id)
                        .ok_or_else(|| SimError::MissingParam(layer.id.clone()))?;
                    let expected = TensorShape::new(1, input.c, 1, 1);
                    for (name, t) in [("gamma", &p.gamma), ("beta", &p.beta)] {
                        if t.shape != expected {
                            return Err(SimError::ShapeMismatch {
                                what: format!("{name} of `{}`", layer.id),
                                expected,
                                got: t.shape,
                            });
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Mailbox and event log
// ---------------------------------------------------------------------------

/// Point-to-point transport: FIFO per (source, destination, tag) channel.
/// Every cross-rank byte of the simulation moves through here.
#[derive(Debug, Default)]
pub struct Mailbox {
    queues: BTreeMap<(usize, usize, String), VecDeque<Vec<f64>>>,
}

impl Mailbox {
    pub fn new() -> Self {
        Mailbox::default()
    }

    pub fn send(&mut self, src: usize, dst: usize, tag: &str, payload: Vec<f64>) {
        self.queues
            .entry((src, dst, tag.to_string()))
            .or_default()
            .push_back(payload);
    }

    pub fn recv(&mut self, src: usize, dst: usize, tag: &str) -> Option<Vec<f64>> {
        self.queues
            .get_mut(&(src, dst, tag.to_string()))
            .and_then(VecDeque::pop_front)
    }

    /// Number of undelivered messages; zero after a balanced exchange.
    pub fn pending(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }
}

pub const EVENT_LOG_HEADER: &str = "step,rank,action,layer,direction,bytes";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub step: usize,
    pub rank: usize,
    /// One of halo-send, halo-recv, shuffle-send, shuffle-recv,
    /// allreduce-send, allreduce-recv.
    pub action: &'static str,
    /// Layer id; shuffle events use the edge `parent->child`.
    pub layer: String,
    /// Phase and direction: `fp:north`, `bp:south-east`, `fwd`, `bwd`,
    /// `reduce`, `broadcast`.
    pub direction: String,
    pub bytes: u64,
}

/// Append-only record of every message the executor sent and received,
/// identical across repeated runs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        EventLog::default()
    }

    fn push(&mut self, rank: usize, action: &'static str, layer: &str, direction: String, bytes: u64) {
        self.events.push(Event { step: 0, rank, action, layer: layer.to_string(), direction, bytes });
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Sum of `bytes` over events matching an action, a layer (or edge)
    /// label, and a direction prefix. Pass `""` to match any direction.
    pub fn sum_bytes(&self, action: &str, layer: &str, direction_prefix: &str) -> u64 {
        self.events
            .iter()
            .filter(|e| {
                e.action == action && e.layer == layer && e.direction.starts_with(direction_prefix)
            })
            .map(|e| e.bytes)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(EVENT_LOG_HEADER);
        out.push('\n');
        for e in &self.events {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.step, e.rank, e.action, e.layer, e.direction, e.bytes
            ));
        }
        out
    }
}

/// Execution knobs. `word_bytes` sets the per-element byte size used in the
/// event log (8 matches the f64 payloads actually moved; use the machine
/// model's word size when reconciling against the cost model).
/// `shrink_halo` deliberately zeroes the outermost received halo ring — a
/// debugging aid proving the verification harness notices corrupt halos.
#[derive(Debug, Clone)]
pub struct SimOptions {
    pub word_bytes: usize,
    pub shrink_halo: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { word_bytes: 8, shrink_halo: false }
    }
}

// ---------------------------------------------------------------------------
// Scatter / gather
// ---------------------------------------------------------------------------

/// Splits a global tensor into per-rank tiles of the ownership's blocks.
pub fn scatter_global(t: &Tensor4, own: &Ownership) -> Vec<Tile> {
    assert_eq!(t.shape, own.shape(), "tensor does not match the distribution");
    let mut tiles = Vec::with_capacity(own.grid.total());
    for rank in 0..own.grid.total() {
        let b = own.rank_box(rank);
        let mut tile = Tile::new(t.shape, b.n.clone(), b.h.clone(), b.w.clone());
        for n in b.n.clone() {
            for c in 0..t.shape.c {
                for h in b.h.clone() {
                    for w in b.w.clone() {
                        tile.set(n, c, h, w, t.get(n, c, h, w));
                    }
                }
            }
        }
        tiles.push(tile);
    }
    tiles
}

/// Reassembles per-rank tiles into the global tensor — the inverse of
/// [`scatter_global`]. Tiles must cover exactly the ownership's blocks
/// (halo-widened tiles are rejected: halo values are copies, not owned).
pub fn gather_global(tiles: &[Tile], own: &Ownership) -> Result<Tensor4, SimError> {
    if tiles.len() != own.grid.total() {
        return Err(SimError::BadShard { rank: tiles.len().min(own.grid.total()) });
    }
    let shape = own.shape();
    let mut out = Tensor4::zeros(shape);
    for (rank, tile) in tiles.iter().enumerate() {
        let b = own.rank_box(rank);
        if tile.bounds() != b || tile.global_shape() != shape {
            return Err(SimError::BadShard { rank });
        }
        for n in b.n.clone() {
            for c in 0..shape.c {
                for h in b.h.clone() {
                    for w in b.w.clone() {
                        out.set(n, c, h, w, tile.get(n, c, h as isize, w as isize));
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Collectives
// ---------------------------------------------------------------------------

/// Deterministic allreduce over a rank group: every member's payload is sent
/// to the lowest-id member, summed in rank order, and broadcast back.
/// Returns the reduced payload per member, aligned with `group`. A group of
/// one is the identity and sends nothing.
pub fn allreduce(
    group: &[usize],
    mut payloads: Vec<Vec<f64>>,
    mail: &mut Mailbox,
    log: &mut EventLog,
    layer: &str,
    word_bytes: usize,
) -> Result<Vec<Vec<f64>>, SimError> {
    assert_eq!(group.len(), payloads.len(), "one payload per group member");
    debug_assert!(group.windows(2).all(|w| w[0] < w[1]), "group sorted by rank id");
    let words = payloads.first().map_or(0, Vec::len);
    if payloads.iter().any(|p| p.len() != words) {
        return Err(SimError::PayloadMismatch { layer: layer.to_string() });
    }
    if group.len() <= 1 {
        return Ok(payloads);
    }

    let root = group[0];
    let bytes = (words * word_bytes) as u64;
    let reduce_tag = format!("{layer}/ar/reduce");
    let bcast_tag = format!("{layer}/ar/broadcast");

    for (i, &rank) in group.iter().enumerate().skip(1) {
        mail.send(rank, root, &reduce_tag, payloads[i].clone());
        log.push(rank, "allreduce-send", layer, "reduce".to_string(), bytes);
    }
    for &rank in group.iter().skip(1) {
        let part = mail.recv(rank, root, &reduce_tag).expect("reduce message sent above");
        log.push(root, "allreduce-recv", layer, "reduce".to_string(), bytes);
        for (acc, v) in payloads[0].iter_mut().zip(&part) {
            *acc += v;
        }
    }
    for &rank in group.iter().skip(1) {
        mail.send(root, rank, &bcast_tag, payloads[0].clone());
        log.push(root, "allreduce-send", layer, "broadcast".to_string(), bytes);
    }
    for (i, &rank) in group.iter().enumerate().skip(1) {
        payloads[i] = mail.recv(root, rank, &bcast_tag).expect("broadcast message sent above");
        log.push(rank, "allreduce-recv", layer, "broadcast".to_string(), bytes);
    }
    Ok(payloads)
}

/// Combines shard-local `(sum, sum of squares)` moments over the ranks
/// holding one sample block's spatial shards, returning full-sample
/// `(mean, variance)` per (local sample, channel) for every member.
/// `spatial_elements` is the full H*W of the normalized tensor.
pub fn bn_spatial_aggregate(
    group: &[usize],
    partials: Vec<Vec<Vec<(f64, f64)>>>,
    spatial_elements: f64,
    mail: &mut Mailbox,
    log: &mut EventLog,
    layer: &str,
    word_bytes: usize,
) -> Result<Vec<Vec<Vec<(f64, f64)>>>, SimError> {
    let flat: Vec<Vec<f64>> = partials
        .iter()
        .map(|per_sample| {
            per_sample
                .iter()
                .flat_map(|per_channel| per_channel.iter().flat_map(|&(s, q)| [s, q]))
                .collect()
        })
        .collect();
    let reduced = allreduce(group, flat, mail, log, layer, word_bytes)?;
    let mut out = Vec::with_capacity(partials.len());
    for (member, shape_of) in reduced.into_iter().zip(&partials) {
        let mut per_sample = Vec::with_capacity(shape_of.len());
        let mut it = member.into_iter();
        for channels in shape_of {
            let mut row = Vec::with_capacity(channels.len());
            for _ in channels {
                let sum = it.next().expect("payload length preserved");
                let sumsq = it.next().expect("payload length preserved");
                row.push(stats_from_sums(sum, sumsq, spatial_elements));
            }
            per_sample.push(row);
        }
        out.push(per_sample);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Exchange phases
// ---------------------------------------------------------------------------

/// Performs one halo exchange: widens each rank's owned tile to its halo
/// spec bounds and fills the halo regions with received messages.
/// `phase` labels the events (`fp` or `bp`).
fn exchange_halo(
    own_tiles: &[Tile],
    spec: &LayerHalo,
    layer: &str,
    phase: &str,
    mail: &mut Mailbox,
    log: &mut EventLog,
    opts: &SimOptions,
) -> Vec<Tile> {
    let channels = own_tiles[0].global_shape().c as u64;
    let mut widened: Vec<Tile> = own_tiles
        .iter()
        .zip(&spec.ranks)
        .map(|(own, halo)| {
            let b = own.bounds();
            let mut t = Tile::new(
                own.global_shape(),
                b.n.clone(),
                halo.tile_h.clone(),
                halo.tile_w.clone(),
            );
            t.splice(&b, &own.extract(&b));
            t
        })
        .collect();

    for (rank, halo) in spec.ranks.iter().enumerate() {
        for dir in HaloDir::ALL {
            if let Some(region) = &halo.sends[dir.index()] {
                // The receiver indexes this message under its own direction,
                // which is the mirror of ours.
                let tag = format!("{layer}/{phase}/{}", dir.opposite().label());
                mail.send(rank, region.peer, &tag, own_tiles[rank].extract(&region.span));
                let bytes = region.span.elements() * channels * opts.word_bytes as u64;
                log.push(rank, "halo-send", layer, format!("{phase}:{}", dir.label()), bytes);
            }
        }
    }
    for (rank, halo) in spec.ranks.iter().enumerate() {
        for dir in HaloDir::ALL {
            if let Some(region) = &halo.recvs[dir.index()] {
                let tag = format!("{layer}/{phase}/{}", dir.label());
                let payload = mail
                    .recv(region.peer, rank, &tag)
                    .expect("send/receive duality holds by construction");
                widened[rank].splice(&region.span, &payload);
                let bytes = region.span.elements() * channels * opts.word_bytes as u64;
                log.push(rank, "halo-recv", layer, format!("{phase}:{}", dir.label()), bytes);
            }
        }
    }

    if opts.shrink_halo {
        for (tile, own) in widened.iter_mut().zip(own_tiles) {
            shrink_halo_ring(tile, &own.bounds());
        }
    }
    widened
}

/// Debug corruption: zeroes the outermost received plane on every side where
/// the tile extends past the owned block. Any computation that truly needs
/// its halo will now disagree with the serial reference.
fn shrink_halo_ring(tile: &mut Tile, own: &Box3) {
    let b = tile.bounds();
    let channels = tile.global_shape().c;
    let mut zero_row = |h: usize| {
        for n in b.n.clone() {
            for c in 0..channels {
                for w in b.w.clone() {
                    tile.set(n, c, h, w, 0.0);
                }
            }
        }
    };
    if b.h.start < own.h.start {
        zero_row(b.h.start);
    }
    if b.h.end > own.h.end {
        zero_row(b.h.end - 1);
    }
    let mut zero_col = |w: usize| {
        for n in b.n.clone() {
            for c in 0..channels {
                for h in b.h.clone() {
                    tile.set(n, c, h, w, 0.0);
                }
            }
        }
    };
    if b.w.start < own.w.start {
        zero_col(b.w.start);
    }
    if b.w.end > own.w.end {
        zero_col(b.w.end - 1);
    }
}

/// Applies a shuffle plan, adding moved rectangles into the destination
/// tiles (accumulation supports multi-parent joins and multi-child gradient
/// sums). Locally kept rectangles are copied without messages.
fn apply_shuffle(
    src_tiles: &[Tile],
    plan: &ShufflePlan,
    dst_tiles: &mut [Tile],
    edge: &str,
    direction: &str,
    mail: &mut Mailbox,
    log: &mut EventLog,
    word_bytes: usize,
) {
    for (rank, span) in &plan.kept {
        dst_tiles[*rank].splice_add(span, &src_tiles[*rank].extract(span));
    }
    let tag = format!("{edge}/{direction}");
    for t in &plan.transfers {
        mail.send(t.src, t.dst, &tag, src_tiles[t.src].extract(&t.span));
        let bytes = t.span.elements() * plan.channels as u64 * word_bytes as u64;
        log.push(t.src, "shuffle-send", edge, direction.to_string(), bytes);
    }
    for t in &plan.transfers {
        let payload = mail.recv(t.src, t.dst, &tag).expect("transfer sent above");
        dst_tiles[t.dst].splice_add(&t.span, &payload);
        let bytes = t.span.elements() * plan.channels as u64 * word_bytes as u64;
        log.push(t.dst, "shuffle-recv", edge, direction.to_string(), bytes);
    }
}

// ---------------------------------------------------------------------------
// Strategy validation
// ---------------------------------------------------------------------------

/// Checks that a per-layer distribution assignment is executable: one
/// distribution per layer, a single rank count, shapes matching the graph,
/// no fully-connected layers, exactly one input and one sink, no empty
/// blocks, and feasible halos for every windowed layer.
pub fn validate_strategy(g: &NetworkGraph, dists: &[LayerDistribution]) -> Result<(), SimError> {
    if dists.len() != g.len() {
        return Err(SimError::DistributionCount { expected: g.len(), got: dists.len() });
    }
    let ranks = dists[0].ranks();
    let sources = g.sources();
    let sinks = g.sinks();
    if sources.len() != 1 {
        return Err(SimError::NotSingleSource(sources.len()));
    }
    if sinks.len() != 1 {
        return Err(SimError::NotSingleSink(sinks.len()));
    }
    for idx in 0..g.len() {
        let layer = g.layer(idx);
        let d = &dists[idx];
        if d.ranks() != ranks {
            return Err(SimError::MixedRankCounts {
                layer: layer.id.clone(),
                expected: ranks,
                got: d.ranks(),
            });
        }
        let shapes = g.shapes(idx);
        if d.in_shape() != shapes.input || d.out_shape() != shapes.output {
            return Err(SimError::DistributionShape { layer: layer.id.clone() });
        }
        if matches!(layer.kind, LayerKind::FullyConnected { .. }) {
            return Err(SimError::FullyConnected { layer: layer.id.clone() });
        }
        for rank in 0..ranks {
            if d.owned_in(rank)?.is_empty() || d.owned_out(rank)?.is_empty() {
                return Err(SimError::EmptyBlock { layer: layer.id.clone(), rank });
            }
        }
        if let Some(win) = layer.kind.window() {
            // Feasibility: every halo the step will need must build.
            if matches!(layer.kind, LayerKind::Pool(_)) {
                pool_halo_spec(d, win)?;
            } else {
                halo_spec(d, win)?;
            }
            gradient_halo_spec(d, win)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// The step
// ---------------------------------------------------------------------------

/// Everything a training step produces that the outside world can check:
/// the gathered sink output, the gathered input gradient, the allreduced
/// weight gradients, and the message log.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub output: Tensor4,
    pub input_grad: Tensor4,
    pub conv_weight_grads: BTreeMap<String, Tensor4>,
    /// Per batch-norm layer: (dgamma, dbeta), summed over all ranks.
    pub bn_param_grads: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    pub events: EventLog,
}

struct LayerRun {
    /// Widened input tiles (None for the input layer).
    x: Option<Vec<Tile>>,
    /// Owned output tiles.
    y: Vec<Tile>,
    /// Batch-norm statistics saved for backward: per rank, per channel for
    /// the shard-local variant...
    bn_local: Option<Vec<Vec<(f64, f64)>>>,
    /// ...or per rank, per (local sample, channel) for the spatial variant.
    bn_spatial: Option<Vec<Vec<Vec<(f64, f64)>>>>,
}

/// Groups of ranks sharing a sample block: consecutive rank-id runs of
/// length `h_parts * w_parts`, one per sample block.
fn spatial_groups(d: &LayerDistribution) -> Vec<Vec<usize>> {
    let gs = d.grid.h_parts * d.grid.w_parts;
    (0..d.grid.n_parts)
        .map(|np| (np * gs..(np + 1) * gs).collect())
        .collect()
}

/// Runs one forward/backward step of `g` under `dists`. The global `input`
/// is scattered according to the input layer's distribution before
/// execution (mid-network redistribution follows each edge's shuffle plan);
/// `sink_grad` seeds the backward pass at the sink, scattered likewise.
pub fn run_step(
    g: &NetworkGraph,
    dists: &[LayerDistribution],
    params: &Params,
    input: &Tensor4,
    sink_grad: &Tensor4,
    opts: &SimOptions,
) -> Result<StepResult, SimError> {
    validate_strategy(g, dists)?;
    params.validate(g)?;
    let source = g.sources()[0];
    let sink = g.sinks()[0];
    let ranks = dists[0].ranks();
    let all_ranks: Vec<usize> = (0..ranks).collect();

    let in_shape = g.shapes(source).input;
    if input.shape != in_shape {
        return Err(SimError::ShapeMismatch {
            what: "input tensor".to_string(),
            expected: in_shape,
            got: input.shape,
        });
    }
    let sink_shape = g.shapes(sink).output;
    if sink_grad.shape != sink_shape {
        return Err(SimError::ShapeMismatch {
            what: "loss-gradient seed".to_string(),
            expected: sink_shape,
            got: sink_grad.shape,
        });
    }

    let mut mail = Mailbox::new();
    let mut log = EventLog::new();
    let mut state: Vec<LayerRun> = Vec::with_capacity(g.len());

    // ---- forward, in topological order ------------------------------------
    for idx in 0..g.len() {
        let layer = g.layer(idx);
        let d = &dists[idx];
        let shapes = g.shapes(idx);

        if let LayerKind::Input(_) = layer.kind {
            state.push(LayerRun {
                x: None,
                y: scatter_global(input, &d.out_ownership()),
                bn_local: None,
                bn_spatial: None,
            });
            continue;
        }

        // Assemble the local input: start from zeros over the owned block
        // and add every parent's (possibly shuffled) output.
        let in_own = d.in_ownership();
        let mut x_base: Vec<Tile> = (0..ranks)
            .map(|r| {
                let b = in_own.rank_box(r);
                Tile::new(shapes.input, b.n.clone(), b.h.clone(), b.w.clone())
            })
            .collect();
        for &p in g.parents(idx) {
            let plan = shuffle_plan(&dists[p].out_ownership(), &in_own)?;
            let edge = format!("{}->{}", g.layer(p).id, layer.id);
            apply_shuffle(
                &state[p].y,
                &plan,
                &mut x_base,
                &edge,
                "fwd",
                &mut mail,
                &mut log,
                opts.word_bytes,
            );
        }

        // Widen with the forward halo where the kernel needs one.
        let x: Vec<Tile> = match &layer.kind {
            LayerKind::Conv(p) => {
                let spec = halo_spec(d, p.window())?;
                exchange_halo(&x_base, &spec, &layer.id, "fp", &mut mail, &mut log, opts)
            }
            LayerKind::Pool(p) => {
                let spec = pool_halo_spec(d, p.window_spec())?;
                exchange_halo(&x_base, &spec, &layer.id, "fp", &mut mail, &mut log, opts)
            }
            _ => x_base,
        };

        let mut bn_local = None;
        let mut bn_spatial = None;
        let mut y: Vec<Tile> = (0..ranks)
            .map(|r| {
                let b = d.owned_out(r).expect("rank validated");
                Tile::new(shapes.output, b.n.clone(), b.h.clone(), b.w.clone())
            })
            .collect();

        match &layer.kind {
            LayerKind::Conv(p) => {
                let w = &params.conv[&layer.id];
                for r in 0..ranks {
                    let out_box = d.owned_out(r)?;
                    conv_fp(&x[r], w, p.window(), &out_box, &mut y[r]);
                }
            }
            LayerKind::Pool(p) => {
                for r in 0..ranks {
                    let out_box = d.owned_out(r)?;
                    pool_fp(&x[r], p.window_spec(), p.kind, &out_box, &mut y[r]);
                }
            }
            LayerKind::Relu => {
                for r in 0..ranks {
                    let b = d.owned_out(r)?;
                    relu_fp(&x[r], &b, &mut y[r]);
                }
            }
            LayerKind::BatchNormLocal => {
                let bp = &params.bn[&layer.id];
                let mut all = Vec::with_capacity(ranks);
                for r in 0..ranks {
                    let b = d.owned_in(r)?;
                    let m = (b.elements()) as f64;
                    let stats: Vec<(f64, f64)> = channel_sums(&x[r], &b)
                        .into_iter()
                        .map(|(s, q)| stats_from_sums(s, q, m))
                        .collect();
                    bn_normalize(&x[r], &b, &|_, c| stats[c], &bp.gamma, &bp.beta, &mut y[r]);
                    all.push(stats);
                }
                bn_local = Some(all);
            }
            LayerKind::BatchNormSpatial => {
                let bp = &params.bn[&layer.id];
                let partials: Vec<Vec<Vec<(f64, f64)>>> = (0..ranks)
                    .map(|r| sample_channel_sums(&x[r], &d.owned_in(r).expect("validated")))
                    .collect();
                let spatial = (shapes.input.h * shapes.input.w) as f64;
                let mut stats: Vec<Vec<Vec<(f64, f64)>>> = vec![Vec::new(); ranks];
                for group in spatial_groups(d) {
                    let members: Vec<Vec<Vec<(f64, f64)>>> =
                        group.iter().map(|&r| partials[r].clone()).collect();
                    let combined = bn_spatial_aggregate(
                        &group,
                        members,
                        spatial,
                        &mut mail,
                        &mut log,
                        &layer.id,
                        opts.word_bytes,
                    )?;
                    for (&r, st) in group.iter().zip(combined) {
                        stats[r] = st;
                    }
                }
                for r in 0..ranks {
                    let b = d.owned_in(r)?;
                    let n0 = b.n.start;
                    let st = &stats[r];
                    bn_normalize(&x[r], &b, &|k, c| st[k - n0][c], &bp.gamma, &bp.beta, &mut y[r]);
                }
                bn_spatial = Some(stats);
            }
            LayerKind::Output => {
                for r in 0..ranks {
                    let b = d.owned_out(r)?;
                    for n in b.n.clone() {
                        for c in 0..shapes.output.c {
                            for h in b.h.clone() {
                                for w in b.w.clone() {
                                    y[r].set(n, c, h, w, x[r].get(n, c, h as isize, w as isize));
                                }
                            }
                        }
                    }
                }
            }
            LayerKind::Input(_) | LayerKind::FullyConnected { .. } => unreachable!("validated"),
        }

        state.push(LayerRun { x: Some(x), y, bn_local, bn_spatial });
    }

    // ---- backward, in reverse topological order ----------------------------
    let mut result = StepResult {
        output: gather_global(&state[sink].y, &dists[sink].out_ownership())?,
        input_grad: Tensor4::zeros(in_shape),
        conv_weight_grads: BTreeMap::new(),
        bn_param_grads: BTreeMap::new(),
        events: EventLog::new(),
    };

    let mut dy_acc: Vec<Option<Vec<Tile>>> = (0..g.len()).map(|_| None).collect();
    dy_acc[sink] = Some(scatter_global(sink_grad, &dists[sink].out_ownership()));

    for idx in (0..g.len()).rev() {
        let layer = g.layer(idx);
        let d = &dists[idx];
        let shapes = g.shapes(idx);
        let dy = dy_acc[idx].take().expect("children ran first and seeded dy");

        // Each rank's dx over its owned input block.
        let make_dx = |d: &LayerDistribution| -> Vec<Tile> {
            (0..ranks)
                .map(|r| {
                    let b = d.owned_in(r).expect("validated");
                    Tile::new(shapes.input, b.n.clone(), b.h.clone(), b.w.clone())
                })
                .collect()
        };

        let dx: Option<Vec<Tile>> = match &layer.kind {
            LayerKind::Input(_) => {
                result.input_grad = gather_global(&dy, &d.out_ownership())?;
                None
            }
            LayerKind::Output => Some(dy),
            LayerKind::Relu => {
                let x = state[idx].x.as_ref().expect("non-input layer");
                let mut dx = make_dx(d);
                for r in 0..ranks {
                    let b = d.owned_in(r)?;
                    relu_bp(&x[r], &dy[r], &b, &mut dx[r]);
                }
                Some(dx)
            }
            LayerKind::Conv(p) => {
                let x = state[idx].x.as_ref().expect("non-input layer");
                let w = &params.conv[&layer.id];
                let win = p.window();

                // Weight gradient from owned error blocks only — `dy` here
                // was never widened, so no halo value can leak in.
                let wshape = w.shape;
                let local_dw: Vec<Vec<f64>> = (0..ranks)
                    .map(|r| {
                        let mut dw = Tensor4::zeros(wshape);
                        let out_box = d.owned_out(r).expect("validated");
                        conv_bp_weights(&x[r], &dy[r], win, &out_box, &mut dw);
                        dw.data
                    })
                    .collect();
                let reduced = allreduce(
                    &all_ranks,
                    local_dw,
                    &mut mail,
                    &mut log,
                    &layer.id,
                    opts.word_bytes,
                )?;
                result.conv_weight_grads.insert(
                    layer.id.clone(),
                    Tensor4 { shape: wshape, data: reduced.into_iter().next().expect("nonempty") },
                );

                // Data gradient needs the widened error signal.
                let spec = gradient_halo_spec(d, win)?;
                let dy_wide = exchange_halo(&dy, &spec, &layer.id, "bp", &mut mail, &mut log, opts);
                let mut dx = make_dx(d);
                for r in 0..ranks {
                    let in_box = d.owned_in(r)?;
                    conv_bp_data(&dy_wide[r], w, win, &in_box, &mut dx[r]);
                }
                Some(dx)
            }
            LayerKind::Pool(p) => {
                let x = state[idx].x.as_ref().expect("non-input layer");
                let win = p.window_spec();
                let spec = gradient_halo_spec(d, win)?;
                let dy_wide = exchange_halo(&dy, &spec, &layer.id, "bp", &mut mail, &mut log, opts);
                let mut dx = make_dx(d);
                for r in 0..ranks {
                    let in_box = d.owned_in(r)?;
                    pool_bp(&x[r], &dy_wide[r], win, p.kind, &in_box, &mut dx[r]);
                }
                Some(dx)
            }
            LayerKind::BatchNormLocal => {
                let x = state[idx].x.as_ref().expect("non-input layer");
                let bp = &params.bn[&layer.id];
                let saved = state[idx].bn_local.as_ref().expect("saved in forward");
                let mut dx = make_dx(d);
                let mut param_payloads = Vec::with_capacity(ranks);
                for r in 0..ranks {
                    let b = d.owned_in(r)?;
                    let st = &saved[r];
                    let stats = |_: usize, c: usize| st[c];
                    let (dgamma, dbeta) = bn_param_grads(&x[r], &dy[r], &b, &stats);
                    param_payloads.push([dgamma, dbeta].concat());

                    // Shard-local normalization: the gradient's coupling sums
                    // run over the same shard, per channel.
                    let m = b.elements() as f64;
                    let per_sample = bn_backward_sums(&x[r], &dy[r], &b, &stats);
                    let channels = shapes.input.c;
                    let mut totals = vec![(0.0, 0.0); channels];
                    for row in &per_sample {
                        for (c, &(s, sx)) in row.iter().enumerate() {
                            totals[c].0 += s;
                            totals[c].1 += sx;
                        }
                    }
                    let group = |_: usize, c: usize| (totals[c].0, totals[c].1, m);
                    bn_backward_data(&x[r], &dy[r], &b, &stats, &group, &bp.gamma, &mut dx[r]);
                }
                let reduced = allreduce(
                    &all_ranks,
                    param_payloads,
                    &mut mail,
                    &mut log,
                    &layer.id,
                    opts.word_bytes,
                )?;
                let c = shapes.input.c;
                let first = &reduced[0];
                result
                    .bn_param_grads
                    .insert(layer.id.clone(), (first[..c].to_vec(), first[c..].to_vec()));
                Some(dx)
            }
            LayerKind::BatchNormSpatial => {
                let x = state[idx].x.as_ref().expect("non-input layer");
                let bp = &params.bn[&layer.id];
                let saved = state[idx].bn_spatial.as_ref().expect("saved in forward");
                let m = (shapes.input.h * shapes.input.w) as f64;
                let mut dx = make_dx(d);

                // Local coupling sums per (sample, channel), then combined
                // over each sample's spatial group.
                let mut partials: Vec<Vec<Vec<(f64, f64)>>> = Vec::with_capacity(ranks);
                let mut param_payloads = Vec::with_capacity(ranks);
                for r in 0..ranks {
                    let b = d.owned_in(r)?;
                    let n0 = b.n.start;
                    let st = &saved[r];
                    let stats = move |k: usize, c: usize| st[k - n0][c];
                    partials.push(bn_backward_sums(&x[r], &dy[r], &b, &stats));
                    let (dgamma, dbeta) = bn_param_grads(&x[r], &dy[r], &b, &stats);
                    param_payloads.push([dgamma, dbeta].concat());
                }
                let mut combined: Vec<Vec<Vec<(f64, f64)>>> = vec![Vec::new(); ranks];
                for group in spatial_groups(d) {
                    let members: Vec<Vec<f64>> = group
                        .iter()
                        .map(|&r| {
                            partials[r]
                                .iter()
                                .flat_map(|row| row.iter().flat_map(|&(s, sx)| [s, sx]))
                                .collect()
                        })
                        .collect();
                    let reduced = allreduce(
                        &group,
                        members,
                        &mut mail,
                        &mut log,
                        &layer.id,
                        opts.word_bytes,
                    )?;
                    for (&r, flat) in group.iter().zip(reduced) {
                        let rows = partials[r].len();
                        let cols = shapes.input.c;
                        let mut st = Vec::with_capacity(rows);
                        for i in 0..rows {
                            let mut row = Vec::with_capacity(cols);
                            for c in 0..cols {
                                row.push((flat[2 * (i * cols + c)], flat[2 * (i * cols + c) + 1]));
                            }
                            st.push(row);
                        }
                        combined[r] = st;
                    }
                }
                for r in 0..ranks {
                    let b = d.owned_in(r)?;
                    let n0 = b.n.start;
                    let st = &saved[r];
                    let sums = &combined[r];
                    let stats = |k: usize, c: usize| st[k - n0][c];
                    let group =
                        |k: usize, c: usize| (sums[k - n0][c].0, sums[k - n0][c].1, m);
                    bn_backward_data(&x[r], &dy[r], &b, &stats, &group, &bp.gamma, &mut dx[r]);
                }
                let reduced = allreduce(
                    &all_ranks,
                    param_payloads,
                    &mut mail,
                    &mut log,
                    &layer.id,
                    opts.word_bytes,
                )?;
                let c = shapes.input.c;
                let first = &reduced[0];
                result
                    .bn_param_grads
                    .insert(layer.id.clone(), (first[..c].to_vec(), first[c..].to_vec()));
                Some(dx)
            }
            LayerKind::FullyConnected { .. } => unreachable!("validated"),
        };

        // Route dx to each parent's error accumulator.
        if let Some(dx) = dx {
            for &p in g.parents(idx) {
                let parent_own = dists[p].out_ownership();
                let plan = shuffle_plan(&d.in_ownership(), &parent_own)?;
                let acc = dy_acc[p].get_or_insert_with(|| {
                    (0..ranks)
                        .map(|r| {
                            let b = parent_own.rank_box(r);
                            Tile::new(shapes.input, b.n.clone(), b.h.clone(), b.w.clone())
                        })
                        .collect()
                });
                let edge = format!("{}->{}", g.layer(p).id, layer.id);
                apply_shuffle(
                    &dx,
                    &plan,
                    acc,
                    &edge,
                    "bwd",
                    &mut mail,
                    &mut log,
                    opts.word_bytes,
                );
            }
        }
    }

    debug_assert_eq!(mail.pending(), 0, "all messages delivered");
    result.events = log;
    Ok(result)
}

// ---------------------------------------------------------------------------
