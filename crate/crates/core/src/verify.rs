//! Serial reference computation and the verification harness.
//!
//! The reference runs the whole network on one full-size tile with the same
//! kernels the executor uses, so any disagreement between the two isolates
//! the distribution machinery — halos, shuffles, collectives — rather than
//! kernel arithmetic. Shard-local batch norm is the one layer whose result
//! legitimately depends on the partitioning; the reference reproduces it by
//! computing statistics over each rank's region when given the strategy.
//!
//! Also here: enumeration of the uniform strategies a rank count admits,
//! and independent gradient checks for the convolution kernels (central
//! finite differences and the adjoint identity), which validate the
//! reference itself against nothing but arithmetic.

use std::collections::BTreeMap;

use crate::dist::{Box3, LayerDistribution, ProcGrid};
use crate::kernels::{
    bn_backward_data, bn_backward_sums, bn_normalize, bn_param_grads, channel_sums, conv_bp_data,
    conv_bp_weights, conv_fp, pool_bp, pool_fp, relu_bp, relu_fp, sample_channel_sums,
    stats_from_sums, Tensor4, Tile,
};
use crate::netgraph::{LayerKind, NetworkGraph, TensorShape, Window};
use crate::simexec::{run_step, validate_strategy, Params, SimError, SimOptions, StepResult};

/// Everything the serial reference produces for one training step.
#[derive(Debug, Clone)]
pub struct SerialOutputs {
    pub output: Tensor4,
    pub input_grad: Tensor4,
    pub conv_weight_grads: BTreeMap<String, Tensor4>,
    pub bn_param_grads: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    /// Magnitude of the largest single contribution (per statistics region
    /// or per sample) entering each batch norm's parameter gradients. A
    /// batch norm feeding another batch norm has analytically zero totals —
    /// the downstream normalization makes the upstream scale and shift
    /// unidentifiable — so the totals' own norm can be pure rounding and is
    /// useless as an error scale. A sharding bug moves the total by one
    /// contribution, which this records.
    pub bn_param_scales: BTreeMap<String, f64>,
}

fn full_box(s: TensorShape) -> Box3 {
    Box3 { n: 0..s.n, h: 0..s.h, w: 0..s.w }
}

fn full_tile_of(t: &Tensor4) -> Tile {
    let mut tile = Tile::full(t.shape);
    tile.data_mut().copy_from_slice(&t.data);
    tile
}

fn tile_to_tensor(t: &Tile) -> Tensor4 {
    debug_assert_eq!(t.bounds(), full_box(t.global_shape()), "full tiles only");
    Tensor4 { shape: t.global_shape(), data: t.data().to_vec() }
}

/// Statistics regions of a shard-local batch norm: the whole tensor when no
/// strategy is given, otherwise one region per rank of that layer's
/// distribution.
fn bn_local_regions(
    idx: usize,
    shape: TensorShape,
    bn_shards: Option<&[LayerDistribution]>,
) -> Result<Vec<Box3>, SimError> {
    match bn_shards {
        None => Ok(vec![full_box(shape)]),
        Some(dists) => (0..dists[idx].ranks())
            .map(|r| dists[idx].owned_in(r).map_err(SimError::from))
            .collect(),
    }
}

/// Runs one training step serially on full tensors. `bn_shards` makes
/// shard-local batch norm reproduce a particular strategy's statistics
/// regions; pass `None` for the plain whole-tensor reference.
pub fn serial_step(
    g: &NetworkGraph,
    params: &Params,
    input: &Tensor4,
    sink_grad: &Tensor4,
    bn_shards: Option<&[LayerDistribution]>,
) -> Result<SerialOutputs, SimError> {
    params.validate(g)?;
    let sources = g.sources();
    let sinks = g.sinks();
    if sources.len() != 1 {
        return Err(SimError::NotSingleSource(sources.len()));
    }
    if sinks.len() != 1 {
        return Err(SimError::NotSingleSink(sinks.len()));
    }
    let sink = sinks[0];

    let in_shape = g.shapes(sources[0]).input;
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

    // ---- forward -----------------------------------------------------------
    struct SerialRun {
        x: Option<Tile>,
        y: Tile,
        /// Shard-local batch norm: per region, (box, per-channel stats).
        bn_local: Option<Vec<(Box3, Vec<(f64, f64)>)>>,
        /// Full-extent batch norm: per (sample, channel) stats.
        bn_spatial: Option<Vec<Vec<(f64, f64)>>>,
    }
    let mut state: Vec<SerialRun> = Vec::with_capacity(g.len());

    for idx in 0..g.len() {
        let layer = g.layer(idx);
        let shapes = g.shapes(idx);

        if let LayerKind::Input(_) = layer.kind {
            state.push(SerialRun {
                x: None,
                y: full_tile_of(input),
                bn_local: None,
                bn_spatial: None,
            });
            continue;
        }

        let mut x = Tile::full(shapes.input);
        for &p in g.parents(idx) {
            let src = state[p].y.data();
            for (acc, v) in x.data_mut().iter_mut().zip(src) {
                *acc += v;
            }
        }

        let b_in = full_box(shapes.input);
        let b_out = full_box(shapes.output);
        let mut y = Tile::full(shapes.output);
        let mut bn_local = None;
        let mut bn_spatial = None;

        match &layer.kind {
            LayerKind::Conv(p) => {
                conv_fp(&x, &params.conv[&layer.id], p.window(), &b_out, &mut y);
            }
            LayerKind::Pool(p) => {
                pool_fp(&x, p.window_spec(), p.kind, &b_out, &mut y);
            }
            LayerKind::Relu => relu_fp(&x, &b_out, &mut y),
            LayerKind::BatchNormLocal => {
                let bp = &params.bn[&layer.id];
                let mut per_region = Vec::new();
                for region in bn_local_regions(idx, shapes.input, bn_shards)? {
                    let m = region.elements() as f64;
                    let stats: Vec<(f64, f64)> = channel_sums(&x, &region)
                        .into_iter()
                        .map(|(s, q)| stats_from_sums(s, q, m))
                        .collect();
                    bn_normalize(&x, &region, &|_, c| stats[c], &bp.gamma, &bp.beta, &mut y);
                    per_region.push((region, stats));
                }
                bn_local = Some(per_region);
            }
            LayerKind::BatchNormSpatial => {
                let bp = &params.bn[&layer.id];
                let m = (shapes.input.h * shapes.input.w) as f64;
                let stats: Vec<Vec<(f64, f64)>> = sample_channel_sums(&x, &b_in)
                    .into_iter()
                    .map(|row| row.into_iter().map(|(s, q)| stats_from_sums(s, q, m)).collect())
                    .collect();
                bn_normalize(&x, &b_in, &|k, c| stats[k][c], &bp.gamma, &bp.beta, &mut y);
                bn_spatial = Some(stats);
            }
            LayerKind::Output => y.data_mut().copy_from_slice(x.data()),
            LayerKind::FullyConnected { .. } => {
                return Err(SimError::FullyConnected { layer: layer.id.clone() });
            }
            LayerKind::Input(_) => unreachable!("handled above"),
        }

        state.push(SerialRun { x: Some(x), y, bn_local, bn_spatial });
    }

    // ---- backward ----------------------------------------------------------
    let mut out = SerialOutputs {
        output: tile_to_tensor(&state[sink].y),
        input_grad: Tensor4::zeros(in_shape),
        conv_weight_grads: BTreeMap::new(),
        bn_param_grads: BTreeMap::new(),
        bn_param_scales: BTreeMap::new(),
    };

    let mut dy_acc: Vec<Option<Tile>> = (0..g.len()).map(|_| None).collect();
    dy_acc[sink] = Some(full_tile_of(sink_grad));

    for idx in (0..g.len()).rev() {
        let layer = g.layer(idx);
        let shapes = g.shapes(idx);
        let dy = dy_acc[idx].take().expect("children ran first");
        let b_in = full_box(shapes.input);
        let b_out = full_box(shapes.output);

        let dx: Option<Tile> = match &layer.kind {
            LayerKind::Input(_) => {
                out.input_grad = tile_to_tensor(&dy);
                None
            }
            LayerKind::Output => Some(dy),
            LayerKind::Relu => {
                let x = state[idx].x.as_ref().expect("non-input");
                let mut dx = Tile::full(shapes.input);
                relu_bp(x, &dy, &b_in, &mut dx);
                Some(dx)
            }
            LayerKind::Conv(p) => {
                let x = state[idx].x.as_ref().expect("non-input");
                let w = &params.conv[&layer.id];
                let mut dw = Tensor4::zeros(w.shape);
                conv_bp_weights(x, &dy, p.window(), &b_out, &mut dw);
                out.conv_weight_grads.insert(layer.id.clone(), dw);
                let mut dx = Tile::full(shapes.input);
                conv_bp_data(&dy, w, p.window(), &b_in, &mut dx);
                Some(dx)
            }
            LayerKind::Pool(p) => {
                let x = state[idx].x.as_ref().expect("non-input");
                let mut dx = Tile::full(shapes.input);
                pool_bp(x, &dy, p.window_spec(), p.kind, &b_in, &mut dx);
                Some(dx)
            }
            LayerKind::BatchNormLocal => {
                let x = state[idx].x.as_ref().expect("non-input");
                let bp = &params.bn[&layer.id];
                let regions = state[idx].bn_local.as_ref().expect("saved in forward");
                let channels = shapes.input.c;
                let mut dx = Tile::full(shapes.input);
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                let mut scale = 0.0f64;
                for (region, stats) in regions {
                    let stats_fn = |_: usize, c: usize| stats[c];
                    let (dg, db) = bn_param_grads(x, &dy, region, &stats_fn);
                    for c in 0..channels {
                        scale = scale.max(dg[c].abs()).max(db[c].abs());
                        dgamma[c] += dg[c];
                        dbeta[c] += db[c];
                    }
                    let m = region.elements() as f64;
                    let per_sample = bn_backward_sums(x, &dy, region, &stats_fn);
                    let mut totals = vec![(0.0, 0.0); channels];
                    for row in &per_sample {
                        for (c, &(s, sx)) in row.iter().enumerate() {
                            totals[c].0 += s;
                            totals[c].1 += sx;
                        }
                    }
                    let group = |_: usize, c: usize| (totals[c].0, totals[c].1, m);
                    bn_backward_data(x, &dy, region, &stats_fn, &group, &bp.gamma, &mut dx);
                }
                out.bn_param_grads.insert(layer.id.clone(), (dgamma, dbeta));
                out.bn_param_scales.insert(layer.id.clone(), scale);
                Some(dx)
            }
            LayerKind::BatchNormSpatial => {
                let x = state[idx].x.as_ref().expect("non-input");
                let bp = &params.bn[&layer.id];
                let stats = state[idx].bn_spatial.as_ref().expect("saved in forward");
                let m = (shapes.input.h * shapes.input.w) as f64;
                let stats_fn = |k: usize, c: usize| stats[k][c];
                let sums = bn_backward_sums(x, &dy, &b_in, &stats_fn);
                // Error scale: the largest per-shard partial entering the
                // parameter-gradient reduction (per sample without a
                // strategy). Finer than the totals on purpose — stacked
                // normalizations zero the totals analytically, and here even
                // per-sample sums vanish, but a rank's partial never does.
                let scale_regions: Vec<Box3> = match bn_shards {
                    Some(dists) => (0..dists[idx].ranks())
                        .map(|r| dists[idx].owned_in(r))
                        .collect::<Result<_, _>>()?,
                    None => (0..shapes.input.n)
                        .map(|k| Box3 { n: k..k + 1, h: b_in.h.clone(), w: b_in.w.clone() })
                        .collect(),
                };
                let scale = scale_regions
                    .iter()
                    .flat_map(|region| {
                        let (dg, db) = bn_param_grads(x, &dy, region, &stats_fn);
                        dg.into_iter().chain(db)
                    })
                    .fold(0.0f64, |s, v| s.max(v.abs()));
                let group = |k: usize, c: usize| (sums[k][c].0, sums[k][c].1, m);
                let mut dx = Tile::full(shapes.input);
                bn_backward_data(x, &dy, &b_in, &stats_fn, &group, &bp.gamma, &mut dx);
                let grads = bn_param_grads(x, &dy, &b_in, &stats_fn);
                out.bn_param_grads.insert(layer.id.clone(), grads);
                out.bn_param_scales.insert(layer.id.clone(), scale);
                Some(dx)
            }
            LayerKind::FullyConnected { .. } => unreachable!("rejected in forward"),
        };

        if let Some(dx) = dx {
            for &p in g.parents(idx) {
                let acc = dy_acc[p].get_or_insert_with(|| Tile::full(shapes.input));
                for (a, v) in acc.data_mut().iter_mut().zip(dx.data()) {
                    *a += v;
                }
            }
        }
    }

    Ok(out)
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

/// Largest absolute difference divided by the reference's largest magnitude
/// (floored to keep all-zero references meaningful). Zero means identical.
pub fn max_rel_error(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "comparing equally sized values");
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
    got.iter()
        .zip(want)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

/// Relative error of every artifact of a step, labeled: the sink output,
/// the input gradient, each convolution's weight gradient, and each batch
/// norm's parameter gradients (scale and shift jointly).
pub fn artifact_errors(got: &StepResult, want: &SerialOutputs) -> Vec<(String, f64)> {
    let mut errors = vec![
        ("output".to_string(), max_rel_error(&got.output.data, &want.output.data)),
        (
            "input-grad".to_string(),
            max_rel_error(&got.input_grad.data, &want.input_grad.data),
        ),
    ];
    for (id, dw) in &want.conv_weight_grads {
        errors.push((
            format!("weight-grad[{id}]"),
            max_rel_error(&got.conv_weight_grads[id].data, &dw.data),
        ));
    }
    for (id, (dg, db)) in &want.bn_param_grads {
        // Parameter gradients are compared against the largest contribution
        // that entered them, not against the totals' own norm: a batch norm
        // feeding another batch norm has analytically zero totals, so the
        // totals are pure rounding while the per-shard summands stay O(1).
        let (g_dg, g_db) = &got.bn_param_grads[id];
        let scale = want.bn_param_scales[id]
            .max(dg.iter().chain(db).fold(0.0f64, |s, v| s.max(v.abs())))
            .max(1e-30);
        let diff = dg
            .iter()
            .chain(db)
            .zip(g_dg.iter().chain(g_db))
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        errors.push((format!("bn-param-grad[{id}]"), diff / scale));
    }
    errors
}

/// Worst relative error across every artifact of a step.
pub fn compare_step(got: &StepResult, want: &SerialOutputs) -> f64 {
    artifact_errors(got, want).iter().fold(0.0f64, |m, (_, e)| m.max(*e))
}

/// Outcome of checking one strategy against the serial reference.
#[derive(Debug)]
pub struct VerifyOutcome {
    pub max_rel: f64,
    pub result: StepResult,
}

/// Runs the executor under `dists` and the serial reference on the same
/// data, returning the worst relative error across all step artifacts.
pub fn verify_strategy(
    g: &NetworkGraph,
    dists: &[LayerDistribution],
    params: &Params,
    input: &Tensor4,
    sink_grad: &Tensor4,
    opts: &SimOptions,
) -> Result<VerifyOutcome, SimError> {
    let result = run_step(g, dists, params, input, sink_grad, opts)?;
    let want = serial_step(g, params, input, sink_grad, Some(dists))?;
    Ok(VerifyOutcome { max_rel: compare_step(&result, &want), result })
}

// ---------------------------------------------------------------------------
// Strategy enumeration
// ---------------------------------------------------------------------------

/// All ordered triples `(n, h, w)` with `n * h * w == p`, sorted by sample
/// parts descending, then by squareness of the spatial split.
pub fn factor_triples(p: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for n in (1..=p).filter(|n| p % n == 0) {
        let rest = p / n;
        for h in (1..=rest).filter(|h| rest % h == 0) {
            out.push((n, h, rest / h));
        }
    }
    out.sort_by_key(|&(n, h, w)| {
        (std::cmp::Reverse(n), (h as isize - w as isize).unsigned_abs(), std::cmp::Reverse(h))
    });
    out
}

/// Every executable strategy that applies one process grid to all layers of
/// the network: the factorizations of `ranks` that survive strategy
/// validation (nonempty blocks and feasible halos on every layer).
pub fn uniform_strategies(g: &NetworkGraph, ranks: usize) -> Vec<Vec<LayerDistribution>> {
    let mut out = Vec::new();
    for (n, h, w) in factor_triples(ranks) {
        let grid = ProcGrid::new(n, h, w);
        let dists: Vec<LayerDistribution> = (0..g.len())
            .map(|i| {
                let s = g.shapes(i);
                LayerDistribution::new(grid, s.input, s.output)
            })
            .collect();
        if validate_strategy(g, &dists).is_ok() {
            out.push(dists);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Kernel gradient checks
// ---------------------------------------------------------------------------

fn conv_out_shape(x: TensorShape, w: &Tensor4, win: Window) -> TensorShape {
    TensorShape::new(x.n, w.shape.n, win.out_extent(x.h), win.out_extent(x.w))
}

/// `L(x, w) = <conv(x; w), cot>`, the scalar whose gradients the backward
/// kernels claim to compute.
fn conv_loss(x: &Tile, w: &Tensor4, win: Window, cot: &Tile) -> f64 {
    let out_shape = conv_out_shape(x.global_shape(), w, win);
    let mut y = Tile::full(out_shape);
    conv_fp(x, w, win, &full_box(out_shape), &mut y);
    y.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum()
}

/// Central-difference check of the weight gradient: perturbs every filter
/// entry by ±`step` and compares the slope against `conv_bp_weights`.
/// Returns the worst error relative to the gradient's largest magnitude.
pub fn conv_weight_fd_error(x: &Tile, w: &Tensor4, win: Window, cot: &Tile, step: f64) -> f64 {
    let out_shape = conv_out_shape(x.global_shape(), w, win);
    let mut dw = Tensor4::zeros(w.shape);
    conv_bp_weights(x, cot, win, &full_box(out_shape), &mut dw);
    let scale = dw.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);

    let mut worst = 0.0f64;
    let mut probe = w.clone();
    for i in 0..w.data.len() {
        probe.data[i] = w.data[i] + step;
        let up = conv_loss(x, &probe, win, cot);
        probe.data[i] = w.data[i] - step;
        let down = conv_loss(x, &probe, win, cot);
        probe.data[i] = w.data[i];
        let slope = (up - down) / (2.0 * step);
        worst = worst.max((slope - dw.data[i]).abs() / scale);
    }
    worst
}

/// Central-difference check of the data gradient: perturbs every input
/// element by ±`step` and compares the slope against `conv_bp_data`.
pub fn conv_data_fd_error(x: &Tile, w: &Tensor4, win: Window, cot: &Tile, step: f64) -> f64 {
    let in_shape = x.global_shape();
    let mut dx = Tile::full(in_shape);
    conv_bp_data(cot, w, win, &full_box(in_shape), &mut dx);
    let scale = dx.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);

    let mut worst = 0.0f64;
    let mut probe = Tile::full(in_shape);
    probe.data_mut().copy_from_slice(x.data());
    for i in 0..x.data().len() {
        probe.data_mut()[i] = x.data()[i] + step;
        let up = conv_loss(&probe, w, win, cot);
        probe.data_mut()[i] = x.data()[i] - step;
        let down = conv_loss(&probe, w, win, cot);
        probe.data_mut()[i] = x.data()[i];
        let slope = (up - down) / (2.0 * step);
        worst = worst.max((slope - dx.data()[i]).abs() / scale);
    }
    worst
}

/// Relative gaps in the adjoint identities that define the two backward
/// kernels: `<conv(x; w), cot> = <x, bp_data(cot; w)> = <w, bp_weights(x, cot)>`.
/// Both are exact linear identities; the gaps measure only rounding.
pub fn conv_adjoint_gaps(x: &Tile, w: &Tensor4, win: Window, cot: &Tile) -> (f64, f64) {
    let in_shape = x.global_shape();
    let out_shape = conv_out_shape(in_shape, w, win);
    let forward = conv_loss(x, w, win, cot);

    let mut dx = Tile::full(in_shape);
    conv_bp_data(cot, w, win, &full_box(in_shape), &mut dx);
    let via_data: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();

    let mut dw = Tensor4::zeros(w.shape);
    conv_bp_weights(x, cot, win, &full_box(out_shape), &mut dw);
    let via_weights: f64 = w.data.iter().zip(&dw.data).map(|(a, b)| a * b).sum();

    let scale = forward.abs().max(1e-12);
    (
        (forward - via_data).abs() / scale,
        (forward - via_weights).abs() / scale,
    )
}

// ---------------------------------------------------------------------------
