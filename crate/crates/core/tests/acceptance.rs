//! Acceptance suite: one test per top-level guarantee, each printing a
//! single pass line (run with `--nocapture` to see them). Every expected
//! value is produced by an oracle that does not share code with the unit
//! under test: brute-force enumeration, finite differences, hand
//! arithmetic, or the executor's own message log.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::Rng;

use parconv::dist::{halo_spec, LayerDistribution, ProcGrid};
use parconv::kernels::Tile;
use parconv::netgraph::{parse_network, NetworkGraph, TensorShape, Window};
use parconv::perfmodel::{
    ar_cost, cost_keys, layer_cost, memory_estimate, network_cost, sr_cost, CostTable, Locality,
    MachineModel,
};
use parconv::planner::{generate_candidates, plan_line, PlanOptions};
use parconv::simexec::{run_step, validate_strategy, SimOptions};
use parconv::synth::{
    random_cost_table, random_network, random_params, random_step_data, random_tensor,
    rng_from_seed, SynthLimits,
};
use parconv::verify::{
    compare_step, conv_adjoint_gaps, conv_data_fd_error, conv_weight_fd_error, serial_step,
    uniform_strategies,
};

// ---------------------------------------------------------------------------
// 1. Gathered step results match the serial oracle
// ---------------------------------------------------------------------------

/// For dozens of seeded random networks and every valid uniform strategy
/// over 1..16 ranks, the gathered output, input gradient, and parameter
/// gradients of the message-passing executor match a from-scratch serial
/// step to 1e-9 relative error.
#[test]
fn step_results_match_the_serial_oracle_across_strategies() {
    const NETWORKS: usize = 60;
    const TOLERANCE: f64 = 1e-9;
    let started = Instant::now();

    let mut checks = 0usize;
    let mut worst = 0.0f64;
    for seed in 0..NETWORKS as u64 {
        let mut rng = rng_from_seed(0xACC0 + seed);
        let g = random_network(&mut rng, &SynthLimits::default());
        let params = random_params(&mut rng, &g);
        let (input, sink_grad) = random_step_data(&mut rng, &g);

        for ranks in [1usize, 2, 4, 8, 16] {
            for dists in uniform_strategies(&g, ranks) {
                let got =
                    run_step(&g, &dists, &params, &input, &sink_grad, &SimOptions::default())
                        .expect("strategy validated by enumeration");
                let want = serial_step(&g, &params, &input, &sink_grad, Some(&dists)).unwrap();
                let rel = compare_step(&got, &want);
                assert!(
                    rel <= TOLERANCE,
                    "seed {seed}, {} ranks, grid {:?}: max relative error {rel:e}",
                    ranks,
                    dists[0].grid
                );
                worst = worst.max(rel);
                checks += 1;
            }
        }
    }

    let elapsed = started.elapsed();
    assert!(NETWORKS >= 50, "at least fifty networks");
    assert!(
        elapsed.as_secs_f64() < 300.0,
        "oracle sweep stayed under five minutes, took {elapsed:?}"
    );
    println!(
        "pass: {NETWORKS} networks, {checks} strategy checks, worst relative error {worst:.3e} \
         (tolerance {TOLERANCE:e}) in {elapsed:.2?}"
    );
}

// ---------------------------------------------------------------------------
// 2. Convolution backward kernels against finite differences
// ---------------------------------------------------------------------------

fn tile_from(rng: &mut impl rand::Rng, shape: TensorShape) -> Tile {
    let t = random_tensor(rng, shape);
    let mut tile = Tile::full(shape);
    tile.data_mut().copy_from_slice(&t.data);
    tile
}

/// The weight and data gradients of the convolution kernel agree with
/// central finite differences on randomized small layers, and both backward
/// kernels satisfy their defining adjoint identities.
#[test]
fn convolution_gradients_pass_finite_difference_and_adjoint_checks() {
    const LAYERS: usize = 24;
    let mut rng = rng_from_seed(0xF1D);

    let mut done = 0usize;
    let mut worst_fd = 0.0f64;
    let mut worst_adjoint = 0.0f64;
    while done < LAYERS {
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=3);
        let f = rng.gen_range(1..=3);
        let h = rng.gen_range(5..=8);
        let w = rng.gen_range(5..=8);
        let k = *[1usize, 3, 5].get(rng.gen_range(0..3)).unwrap();
        let stride = rng.gen_range(1..=2);
        let padding = if rng.gen_bool(0.5) { k / 2 } else { 0 };
        let win = Window { size: k, stride, padding };
        if k > h.min(w) || win.out_extent(h) == 0 || win.out_extent(w) == 0 {
            continue;
        }

        let in_shape = TensorShape::new(n, c, h, w);
        let out_shape =
            TensorShape::new(n, f, win.out_extent(h), win.out_extent(w));
        let x = tile_from(&mut rng, in_shape);
        let weights = random_tensor(&mut rng, TensorShape::new(f, c, k, k));
        let cot = tile_from(&mut rng, out_shape);

        let ew = conv_weight_fd_error(&x, &weights, win, &cot, 1e-6);
        let ed = conv_data_fd_error(&x, &weights, win, &cot, 1e-6);
        assert!(ew <= 1e-6, "weight gradient FD error {ew:e} at {in_shape:?} k{k} s{stride}");
        assert!(ed <= 1e-6, "data gradient FD error {ed:e} at {in_shape:?} k{k} s{stride}");

        let (gap_d, gap_w) = conv_adjoint_gaps(&x, &weights, win, &cot);
        assert!(gap_d <= 1e-10, "data adjoint gap {gap_d:e}");
        assert!(gap_w <= 1e-10, "weight adjoint gap {gap_w:e}");

        worst_fd = worst_fd.max(ew).max(ed);
        worst_adjoint = worst_adjoint.max(gap_d).max(gap_w);
        done += 1;
    }

    println!(
        "pass: {LAYERS} randomized layers, worst finite-difference error {worst_fd:.3e} \
         (tolerance 1e-6), worst adjoint gap {worst_adjoint:.3e} (tolerance 1e-10)"
    );
}

// ---------------------------------------------------------------------------
// 3. Halo receive sets against brute-force dependence enumeration
// ---------------------------------------------------------------------------

type PeerSets = BTreeMap<usize, BTreeSet<(usize, usize)>>;

/// Off-rank input requirements of one rank, from scanning the raw
/// convolution index arithmetic (`input = output * stride + tap - padding`)
/// over every owned output element, grouped by the owning peer.
///
/// Two granularities: `elements` holds exactly the coordinates some owned
/// output reads; `tile` holds the rectangular hull of those per-dimension
/// requirements, which is the working region a rank must materialize to run
/// a dense kernel over its block. Whenever the kernel is at least as wide
/// as the stride, consecutive windows abut or overlap and the two sets are
/// provably identical; a 1x1 kernel under stride 2 is the one listed shape
/// whose element set is strided and therefore not a rectangle.
fn brute_force_halo(d: &LayerDistribution, win: Window, rank: usize) -> (PeerSets, PeerSets) {
    let own_out = d.owned_out(rank).unwrap();
    let own_in = d.owned_in(rank).unwrap();
    let in_shape = d.in_shape();

    let needed = |outs: std::ops::Range<usize>, extent: usize| -> BTreeSet<usize> {
        let mut set = BTreeSet::new();
        for o in outs {
            for tap in 0..win.size {
                let i = (o * win.stride + tap) as isize - win.padding as isize;
                if i >= 0 && (i as usize) < extent {
                    set.insert(i as usize);
                }
            }
        }
        set
    };
    let hull = |set: &BTreeSet<usize>| -> Vec<usize> {
        match (set.first(), set.last()) {
            (Some(&lo), Some(&hi)) => (lo..=hi).collect(),
            _ => Vec::new(),
        }
    };

    let mut elements: PeerSets = BTreeMap::new();
    let mut tile: PeerSets = BTreeMap::new();
    if own_out.h.is_empty() || own_out.w.is_empty() {
        return (elements, tile);
    }
    let owners = d.in_ownership();
    let rows = needed(own_out.h.clone(), in_shape.h);
    let cols = needed(own_out.w.clone(), in_shape.w);
    let collect = |hs: &[usize], ws: &[usize], out: &mut PeerSets| {
        for &ih in hs {
            for &iw in ws {
                if own_in.h.contains(&ih) && own_in.w.contains(&iw) {
                    continue;
                }
                let peer = owners.owner(own_in.n.start, ih, iw);
                out.entry(peer).or_default().insert((ih, iw));
            }
        }
    };
    let row_list: Vec<usize> = rows.iter().copied().collect();
    let col_list: Vec<usize> = cols.iter().copied().collect();
    collect(&row_list, &col_list, &mut elements);
    collect(&hull(&rows), &hull(&cols), &mut tile);
    (elements, tile)
}

/// The forward halo plan declares exactly the off-rank input tile that the
/// convolution index arithmetic requires — checked by exhaustive set
/// equality over kernel sizes 1/3/5/7, strides 1/2, zero and
/// shape-preserving padding, and every spatial grid up to 4x4. For every
/// kernel at least as wide as its stride the tile equals the element-level
/// dependence set, so the comparison is element-exact there; for the one
/// strided 1x1 shape the plan must still cover every needed element.
#[test]
fn forward_halo_sets_equal_brute_force_dependence_enumeration() {
    let mut combos = 0usize;
    let mut element_exact = 0usize;
    for k in [1usize, 3, 5, 7] {
        let mut pads = vec![0usize];
        if k > 1 {
            pads.push(k / 2);
        }
        for stride in [1usize, 2] {
            for &padding in &pads {
                let win = Window { size: k, stride, padding };
                // Extents sized so every (kernel, stride, padding, grid)
                // combination keeps its halo within one neighbour: an even
                // power of two, and a remainder-heavy pair that misaligns
                // the input and output block boundaries.
                for (h, w) in [(32usize, 32usize), (19, 17)] {
                    let in_shape = TensorShape::new(2, 3, h, w);
                    let out_shape = TensorShape::new(
                        2,
                        4,
                        win.out_extent(h),
                        win.out_extent(w),
                    );
                    for h_parts in 1..=4usize {
                        for w_parts in 1..=4usize {
                            let grid = ProcGrid::new(1, h_parts, w_parts);
                            let d = LayerDistribution::new(grid, in_shape, out_shape);
                            let halo = halo_spec(&d, win)
                                .expect("all enumerated combinations are feasible");
                            for rank in 0..grid.total() {
                                let (want_elems, want_tile) = brute_force_halo(&d, win, rank);
                                let own_in = d.owned_in(rank).unwrap();

                                let mut got: PeerSets = BTreeMap::new();
                                for region in halo.ranks[rank].recvs.iter().flatten() {
                                    assert_eq!(
                                        region.span.n, own_in.n,
                                        "halo moves only this rank's samples"
                                    );
                                    let set = got.entry(region.peer).or_default();
                                    for ih in region.span.h.clone() {
                                        for iw in region.span.w.clone() {
                                            assert!(
                                                !(own_in.h.contains(&ih)
                                                    && own_in.w.contains(&iw)),
                                                "received coordinates are never owned"
                                            );
                                            assert!(
                                                set.insert((ih, iw)),
                                                "receive regions do not overlap"
                                            );
                                        }
                                    }
                                }
                                assert_eq!(
                                    got, want_tile,
                                    "k{k} s{stride} pad{padding} {h}x{w} grid \
                                     {h_parts}x{w_parts} rank {rank}: required tile"
                                );
                                if k >= stride {
                                    assert_eq!(
                                        want_tile, want_elems,
                                        "abutting windows make the tile element-exact"
                                    );
                                } else {
                                    for (peer, coords) in &want_elems {
                                        let covered = got.get(peer).cloned().unwrap_or_default();
                                        assert!(
                                            coords.is_subset(&covered),
                                            "k{k} s{stride}: every needed element is received"
                                        );
                                    }
                                }

                                // Sends mirror the peers' receives and stay
                                // inside the sender's own block.
                                for send in halo.ranks[rank].sends.iter().flatten() {
                                    for ih in send.span.h.clone() {
                                        for iw in send.span.w.clone() {
                                            assert!(
                                                own_in.h.contains(&ih) && own_in.w.contains(&iw),
                                                "send ranges come from owned data"
                                            );
                                        }
                                    }
                                    let (_, back) = brute_force_halo(&d, win, send.peer);
                                    let from_me = back.get(&rank).cloned().unwrap_or_default();
                                    for ih in send.span.h.clone() {
                                        for iw in send.span.w.clone() {
                                            assert!(
                                                from_me.contains(&(ih, iw)),
                                                "sent coordinates are required by the peer"
                                            );
                                        }
                                    }
                                }
                            }
                            combos += 1;
                            if k >= stride {
                                element_exact += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    println!(
        "pass: {combos} (kernel, stride, padding, extent, grid) combinations match the \
         dependence enumeration exactly ({element_exact} element-exact, the rest covered \
         strided 1x1 reads)"
    );
}

// ---------------------------------------------------------------------------
// 4. Line planner against exhaustive enumeration
// ---------------------------------------------------------------------------

/// Minimum objective over the full cartesian product of candidate
/// assignments, priced by the same whole-network cost the planner reports.
fn exhaustive_minimum(
    g: &NetworkGraph,
    cands: &[Vec<LayerDistribution>],
    m: &MachineModel,
    t: &CostTable,
) -> f64 {
    let mut pick = vec![0usize; g.len()];
    let mut best = f64::INFINITY;
    loop {
        let dists: Vec<LayerDistribution> = pick
            .iter()
            .enumerate()
            .map(|(idx, &c)| cands[idx][c].clone())
            .collect();
        let cost = network_cost(g, &dists, m, t, false).unwrap().objective;
        if cost < best {
            best = cost;
        }
        // Odometer over the candidate lists.
        let mut idx = 0;
        loop {
            if idx == pick.len() {
                return best;
            }
            pick[idx] += 1;
            if pick[idx] < cands[idx].len() {
                break;
            }
            pick[idx] = 0;
            idx += 1;
        }
    }
}

/// On over a hundred seeded unbranched networks with randomized cost tables
/// and machines, the shortest-path planner's objective equals the
/// exhaustive-enumeration minimum bit for bit.
#[test]
fn line_planner_matches_exhaustive_enumeration() {
    const NETWORKS: usize = 110;
    let started = Instant::now();
    let limits = SynthLimits {
        min_layers: 2,
        max_layers: 6,
        allow_branches: false,
        ..SynthLimits::default()
    };
    let opts = PlanOptions { max_candidates: 4, ..PlanOptions::default() };

    for seed in 0..NETWORKS as u64 {
        let mut rng = rng_from_seed(0x11E + seed);
        let g = random_network(&mut rng, &limits);
        let alpha = 10f64.powf(rng.gen_range(-7.0..-5.0));
        let beta = 10f64.powf(rng.gen_range(-10.0..-8.0));
        let m = MachineModel::flat(4, alpha, beta, 8);
        let cands = generate_candidates(&g, &m, &opts).unwrap();
        let lists = cands.all_dists();
        let t = random_cost_table(&mut rng, &g, &lists, 1e-5, 100.0);

        let plan = plan_line(&g, &cands, &m, &t, &opts).unwrap();
        let brute = exhaustive_minimum(&g, &lists, &m, &t);
        assert_eq!(
            plan.objective_seconds, brute,
            "seed {seed}: planned {} vs exhaustive {brute}",
            plan.objective_seconds
        );
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "stayed under thirty seconds, took {elapsed:?}");
    println!("pass: {NETWORKS} line networks, planner equals exhaustive minimum exactly, {elapsed:.2?}");
}

// ---------------------------------------------------------------------------
// 5. Per-sample memory against hand arithmetic
// ---------------------------------------------------------------------------

/// A single 18-channel 2048x2048 sample held in single precision costs
/// exactly 18 * 2048 * 2048 * 4 bytes = 288 MiB of activation storage.
#[test]
fn single_sample_memory_matches_hand_arithmetic() {
    let g = parse_network(
        r#"{"layers": [{"id": "in", "kind": "input", "n": 1, "c": 18, "h": 2048, "w": 2048}]}"#,
    )
    .unwrap();
    let grid = ProcGrid::new(1, 1, 1);
    let shapes = g.shapes(0);
    let dists = vec![LayerDistribution::new(grid, shapes.input, shapes.output)];
    let est = memory_estimate(&g, &dists, 4).unwrap();

    let by_hand: u64 = 18 * 2048 * 2048 * 4;
    assert_eq!(by_hand, 288 * 1024 * 1024);
    assert_eq!(est.per_layer[0].activations, by_hand);
    assert_eq!(est.per_layer[0].weights, 0);
    assert_eq!(est.per_layer[0].halo_buffers, 0);
    println!("pass: one 2048x2048x18 single-precision sample is exactly 288 MiB of activations");
}

// ---------------------------------------------------------------------------
// 6. Structural identities of the communication model
// ---------------------------------------------------------------------------

/// Constant-value cost table covering every enumerated candidate of a
/// network, so compute time cannot differentiate strategies.
fn constant_table(
    g: &NetworkGraph,
    per_layer: &[Vec<LayerDistribution>],
    seconds: f64,
) -> CostTable {
    let mut t = CostTable::default();
    for (idx, dists) in per_layer.iter().enumerate() {
        for d in dists {
            if let Ok(keys) = cost_keys(g, idx, d) {
                for key in keys {
                    t.insert(key, seconds);
                }
            }
        }
    }
    t
}

fn conv_line(n: usize, c: usize, h: usize, w: usize, f: usize, k: usize) -> NetworkGraph {
    parse_network(&format!(
        r#"{{"layers": [
            {{"id": "in", "kind": "input", "n": {n}, "c": {c}, "h": {h}, "w": {w}}},
            {{"id": "c1", "kind": "conv", "parents": ["in"], "filters": {f},
              "kernel": {k}, "stride": 1, "padding": {pad}}},
            {{"id": "out", "kind": "output", "parents": ["c1"]}}
        ]}}"#,
        pad = k / 2
    ))
    .unwrap()
}

/// Exact structural facts of the communication model: one-rank allreduces
/// are free, an empty point-to-point message still pays full latency,
/// unsplit width eliminates east/west and corner halo terms, 1x1 kernels
/// have no halo at all, and with equal compute entries a pure sample split
/// never has a slower forward phase than a spatial split of the same layer.
#[test]
fn communication_model_structural_identities() {
    let m = MachineModel::new(8, 4, 3e-6, 9e-6, 2e-9, 7e-9, 4).unwrap();

    // (a) Degenerate collectives, both localities.
    for loc in [Locality::Intra, Locality::Inter] {
        assert_eq!(ar_cost(&m, 1, 123_456, loc), 0.0, "one-rank allreduce is free");
        assert_eq!(sr_cost(&m, 0, loc), m.alpha(loc), "empty message pays exactly latency");
    }

    // (b) Width kept whole: no east/west or diagonal receives anywhere.
    let g = conv_line(2, 3, 24, 24, 4, 5);
    let shapes = g.shapes(1);
    let win = Window { size: 5, stride: 1, padding: 2 };
    let rows_only =
        LayerDistribution::new(ProcGrid::new(1, 4, 1), shapes.input, shapes.output);
    let halo = halo_spec(&rows_only, win).unwrap();
    let mut north_south = 0usize;
    for rank in halo.ranks.iter() {
        for (dir, region) in rank.recvs.iter().enumerate() {
            // Direction slots 0/1 are north/south; everything else must be
            // empty when the width dimension is unsplit.
            if region.is_some() {
                assert!(dir < 2, "only north/south receives, found slot {dir}");
                north_south += 1;
            }
        }
    }
    assert!(north_south > 0, "rows-only split still exchanges north/south");

    // (c) 1x1 kernels: no halo exchange, no halo time, for every grid.
    let g1 = conv_line(4, 3, 16, 16, 5, 1);
    let t1 = constant_table(&g1, &uniform_dists_per_layer(&g1, 4), 1e-4);
    for dists in uniform_strategies(&g1, 4) {
        let win1 = Window { size: 1, stride: 1, padding: 0 };
        assert!(halo_spec(&dists[1], win1).unwrap().is_empty());
        let c = layer_cost(&g1, 1, &dists[1], &m, &t1, false).unwrap();
        assert_eq!(c.halo_fwd_bytes, 0);
        assert_eq!(c.halo_bwd_bytes, 0);
        assert_eq!(c.fp_halo_time, 0.0);
        assert_eq!(c.bp_halo_time, 0.0);
    }

    // (d) Equal compute entries: the sample-only forward phase is never
    // slower than any spatial split of the same layer.
    let g8 = conv_line(8, 4, 16, 16, 4, 3);
    let per_layer = uniform_dists_per_layer(&g8, 8);
    let t8 = constant_table(&g8, &per_layer, 1e-4);
    let conv_dists: Vec<&LayerDistribution> =
        per_layer[1].iter().collect();
    let sample = conv_dists
        .iter()
        .find(|d| d.grid.n_parts == 8)
        .expect("batch of eight admits the pure sample split");
    let sample_fp = layer_cost(&g8, 1, sample, &m, &t8, false).unwrap().exposed_fp;
    for d in &conv_dists {
        let fp = layer_cost(&g8, 1, d, &m, &t8, false).unwrap().exposed_fp;
        assert!(
            sample_fp <= fp,
            "sample split forward {sample_fp:e} vs {:?} forward {fp:e}",
            d.grid
        );
    }

    println!("pass: collective degenerate cases, unsplit-width and 1x1-kernel halo elimination, and the sample-split forward bound all hold exactly");
}

/// Per-layer candidate lists containing every uniform grid the network
/// admits at `ranks`.
fn uniform_dists_per_layer(g: &NetworkGraph, ranks: usize) -> Vec<Vec<LayerDistribution>> {
    let mut per_layer: Vec<Vec<LayerDistribution>> = vec![Vec::new(); g.len()];
    for dists in uniform_strategies(g, ranks) {
        for (idx, d) in dists.into_iter().enumerate() {
            per_layer[idx].push(d);
        }
    }
    per_layer
}

// ---------------------------------------------------------------------------
// 7. Executor byte totals against the analytic model
// ---------------------------------------------------------------------------

/// The executor's message log, reduced to received-byte totals per layer
/// (halos split by phase, allreduces) and per edge (shuffles by direction).
struct LoggedBytes {
    halo_fp: BTreeMap<String, u64>,
    halo_bp: BTreeMap<String, u64>,
    allreduce: BTreeMap<String, u64>,
    shuffle_fwd: BTreeMap<String, u64>,
    shuffle_bwd: BTreeMap<String, u64>,
}

fn logged_bytes(events: &parconv::simexec::EventLog) -> LoggedBytes {
    let mut out = LoggedBytes {
        halo_fp: BTreeMap::new(),
        halo_bp: BTreeMap::new(),
        allreduce: BTreeMap::new(),
        shuffle_fwd: BTreeMap::new(),
        shuffle_bwd: BTreeMap::new(),
    };
    for e in &events.events {
        let slot = match e.action {
            "halo-recv" if e.direction.starts_with("fp:") => &mut out.halo_fp,
            "halo-recv" => &mut out.halo_bp,
            "allreduce-recv" => &mut out.allreduce,
            "shuffle-recv" if e.direction == "fwd" => &mut out.shuffle_fwd,
            "shuffle-recv" => &mut out.shuffle_bwd,
            _ => continue,
        };
        *slot.entry(e.layer.clone()).or_insert(0) += e.bytes;
    }
    out
}

/// For a dozen network/strategy configurations — uniform and mixed — every
/// byte the executor logs is predicted exactly: per-layer forward and
/// backward halo bytes, per-layer allreduce bytes, and per-edge shuffle
/// bytes in both directions.
#[test]
fn executor_byte_totals_match_the_analytic_model() {
    let m = MachineModel::flat(4, 1e-6, 1e-9, 8);
    let opts = SimOptions { word_bytes: 8, shrink_halo: false };
    let mut configs = 0usize;

    for seed in 0..6u64 {
        let mut rng = rng_from_seed(0xB17E + seed);
        let g = random_network(&mut rng, &SynthLimits::default());
        let params = random_params(&mut rng, &g);
        let (input, sink_grad) = random_step_data(&mut rng, &g);

        let uniforms = uniform_strategies(&g, 4);
        let mut strategies: Vec<Vec<LayerDistribution>> =
            uniforms.iter().take(2).cloned().collect();
        // A mixed strategy: switch grids halfway so shuffle traffic exists.
        if uniforms.len() >= 2 {
            let half = g.len() / 2;
            let mixed: Vec<LayerDistribution> = (0..g.len())
                .map(|i| {
                    if i < half {
                        uniforms[0][i].clone()
                    } else {
                        uniforms[uniforms.len() - 1][i].clone()
                    }
                })
                .collect();
            if validate_strategy(&g, &mixed).is_ok() {
                strategies.push(mixed);
            }
        }

        for dists in strategies {
            let per_layer: Vec<Vec<LayerDistribution>> =
                dists.iter().map(|d| vec![d.clone()]).collect();
            let t = random_cost_table(&mut rng, &g, &per_layer, 1e-5, 10.0);
            let nc = network_cost(&g, &dists, &m, &t, false).unwrap();
            let got = run_step(&g, &dists, &params, &input, &sink_grad, &opts).unwrap();
            let logged = logged_bytes(&got.events);

            for idx in 0..g.len() {
                let id = &g.layer(idx).id;
                let c = &nc.layers[idx];
                assert_eq!(
                    logged.halo_fp.get(id).copied().unwrap_or(0),
                    c.halo_fwd_bytes,
                    "seed {seed} layer {id}: forward halo bytes"
                );
                assert_eq!(
                    logged.halo_bp.get(id).copied().unwrap_or(0),
                    c.halo_bwd_bytes,
                    "seed {seed} layer {id}: backward halo bytes"
                );
                assert_eq!(
                    logged.allreduce.get(id).copied().unwrap_or(0),
                    c.allreduce_bytes,
                    "seed {seed} layer {id}: allreduce bytes"
                );
            }
            let mut expected_edges = 0u64;
            for e in &nc.edges {
                let label =
                    format!("{}->{}", g.layer(e.from).id, g.layer(e.to).id);
                assert_eq!(
                    logged.shuffle_fwd.get(&label).copied().unwrap_or(0),
                    e.fwd_bytes,
                    "seed {seed} edge {label}: forward shuffle bytes"
                );
                assert_eq!(
                    logged.shuffle_bwd.get(&label).copied().unwrap_or(0),
                    e.bwd_bytes,
                    "seed {seed} edge {label}: backward shuffle bytes"
                );
                expected_edges += e.fwd_bytes + e.bwd_bytes;
            }
            let logged_edges: u64 = logged.shuffle_fwd.values().sum::<u64>()
                + logged.shuffle_bwd.values().sum::<u64>();
            assert_eq!(logged_edges, expected_edges, "no unaccounted shuffle traffic");
            configs += 1;
        }
    }

    assert!(configs >= 10, "at least ten configurations, ran {configs}");
    println!("pass: {configs} configurations, logged bytes equal analytic bytes exactly");
}

// ---------------------------------------------------------------------------
// 8. Planning regimes
// ---------------------------------------------------------------------------

/// Ordinal behaviour on the two regimes that motivate mixed strategies:
/// with compute-dominant costs and a per-rank memory cap that the
/// remainder-imbalanced pure sample split cannot meet, the planner picks a
/// spatially split strategy that fits; with small activations and high
/// message latency it picks the pure sample split, which sends no halos.
#[test]
fn planner_follows_compute_and_latency_regimes() {
    // Regime one: large activations, cheap messages, six samples over four
    // ranks (the sample split parks a third of the data on one rank).
    let g = conv_line(6, 3, 64, 64, 8, 3);
    let m = MachineModel::flat(4, 1e-7, 1e-10, 8);

    let free = PlanOptions { max_candidates: 16, ..PlanOptions::default() };
    let cands = generate_candidates(&g, &m, &free).unwrap();
    // Compute seconds proportional to the local element count, so compute
    // dominates and rewards balance.
    let mut t = CostTable::default();
    for (idx, dists) in cands.all_dists().iter().enumerate() {
        for d in dists {
            if let Ok(keys) = cost_keys(&g, idx, d) {
                for key in keys {
                    let elems = (key.n * key.c * key.h * key.w) as f64;
                    t.insert(key, 1e-8 * elems);
                }
            }
        }
    }

    let sample_dists: Vec<LayerDistribution> = uniform_strategies(&g, 4)
        .into_iter()
        .find(|d| d[0].grid.n_parts == 4)
        .expect("pure sample split is executable");
    let sample_worst = memory_estimate(&g, &sample_dists, 8).unwrap().total_bytes;
    let spatial_floor = uniform_strategies(&g, 4)
        .into_iter()
        .filter(|d| d[0].grid.n_parts < 4)
        .map(|d| memory_estimate(&g, &d, 8).unwrap().total_bytes)
        .min()
        .unwrap();
    assert!(spatial_floor < sample_worst, "the imbalanced split costs more memory");
    let cap = (sample_worst + spatial_floor) / 2;

    let capped = PlanOptions { mem_cap_bytes: Some(cap), ..PlanOptions::default() };
    let cap_cands = generate_candidates(&g, &m, &capped).unwrap();
    let plan = plan_line(&g, &cap_cands, &m, &t, &capped).unwrap();
    let conv_grid = plan.grids()["c1"];
    assert!(
        conv_grid.h_parts > 1 || conv_grid.w_parts > 1,
        "cap {cap} forces a spatial or hybrid split, got {conv_grid:?}"
    );
    assert!(
        plan.per_rank_memory.iter().all(|&b| b <= cap),
        "the selected strategy fits the cap"
    );

    // Regime two: small activations, steep latency. Halo exchanges cost a
    // full latency each; the balanced sample split sends nothing.
    let g2 = conv_line(16, 4, 8, 8, 4, 3);
    let m2 = MachineModel::flat(4, 1e-4, 1e-9, 8);
    let cands2 = generate_candidates(&g2, &m2, &free).unwrap();
    let t2 = constant_table(&g2, &cands2.all_dists(), 1e-6);
    let plan2 = plan_line(&g2, &cands2, &m2, &t2, &free).unwrap();
    let conv_grid2 = plan2.grids()["c1"];
    assert_eq!(
        (conv_grid2.n_parts, conv_grid2.h_parts, conv_grid2.w_parts),
        (4, 1, 1),
        "latency-dominated planning stays sample-only"
    );

    println!("pass: memory cap forces spatial splitting under compute-dominant costs; latency-dominated costs keep the pure sample split");
}
