//! Seeded generation of random networks, tensors, parameters, and cost
//! tables for the verification suites. Everything here is a pure function
//! of the caller's random-number generator, so a printed seed replays any
//! run exactly.
//!
//! Generated networks stay deliberately small: the oracle-equivalence suite
//! multiplies every network by every valid strategy over several rank
//! counts, and the reference step is quadratic in the spatial extent for
//! convolutions. Shapes are biased toward the small end of the allowed
//! range so a full sweep finishes in seconds, with occasional larger
//! outliers for coverage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels::Tensor4;
use crate::netgraph::{ConvParams, LayerKind, LayerSpec, NetworkGraph, PoolParams, PoolKind, TensorShape};
use crate::perfmodel::{cost_keys, CostTable};
use crate::simexec::{BnParams, Params};
use crate::dist::LayerDistribution;

/// Bounds for random network generation. Layer counts refer to the hidden
/// layers between the input and output markers.
#[derive(Debug, Clone)]
pub struct SynthLimits {
    pub min_layers: usize,
    pub max_layers: usize,
    pub max_samples: usize,
    pub max_channels: usize,
    pub max_spatial: usize,
    /// Allow two-branch residual joins (consumes three layers of budget).
    pub allow_branches: bool,
}

impl Default for SynthLimits {
    fn default() -> Self {
        SynthLimits {
            min_layers: 3,
            max_layers: 8,
            max_samples: 2,
            max_channels: 8,
            max_spatial: 32,
            allow_branches: true,
        }
    }
}

/// A deterministic generator from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-1, 1).
pub fn random_tensor(rng: &mut impl Rng, shape: TensorShape) -> Tensor4 {
    let mut t = Tensor4::zeros(shape);
    for v in &mut t.data {
        *v = rng.gen_range(-1.0..1.0);
    }
    t
}

/// Picks from `choices` with the matching relative `weights`.
fn weighted<'a, T>(rng: &mut impl Rng, choices: &'a [(T, u32)]) -> &'a T {
    let total: u32 = choices.iter().map(|(_, w)| w).sum();
    let mut at = rng.gen_range(0..total);
    for (c, w) in choices {
        if at < *w {
            return c;
        }
        at -= w;
    }
    unreachable!("weights sum to total")
}

/// Spatial extents biased small so verification sweeps stay fast; the
/// larger sizes appear occasionally for coverage.
fn random_extent(rng: &mut impl Rng, max_spatial: usize) -> usize {
    let pick = *weighted(
        rng,
        &[(6usize, 3), (8, 4), (10, 3), (12, 3), (16, 2), (24, 1), (32, 1)],
    );
    pick.min(max_spatial)
}

fn random_channels(rng: &mut impl Rng, max_channels: usize) -> usize {
    let pick = *weighted(rng, &[(1usize, 1), (2, 3), (3, 3), (4, 2), (6, 1), (8, 1)]);
    pick.min(max_channels)
}

/// One hidden layer appended to a chain ending in `(c, h, w)`; returns the
/// new kind and the shape it produces. `None` when the sampled kind cannot
/// apply at this shape (caller retries).
///
/// `bn_blocked` suppresses batch-norm kinds. The caller sets it after a
/// batch norm until a nonlinearity intervenes: stacking normalizations
/// across a purely affine chain makes the earlier one's scale and shift
/// unidentifiable (its parameter gradients are analytically zero), which no
/// real network does and which turns relative-error checks into noise
/// comparisons.
fn sample_layer(
    rng: &mut impl Rng,
    c: usize,
    h: usize,
    w: usize,
    max_channels: usize,
    bn_blocked: bool,
) -> Option<(LayerKind, (usize, usize, usize))> {
    let kind = *weighted(
        rng,
        &[("conv", 8u32), ("relu", 4), ("pool", 3), ("bn-local", 2), ("bn-spatial", 3)],
    );
    if bn_blocked && kind.starts_with("bn") {
        return None;
    }
    match kind {
        "conv" => {
            let kernel = *weighted(rng, &[(1usize, 3), (3, 6), (5, 2), (7, 1)]);
            if kernel > h.min(w) {
                return None;
            }
            // Mostly shape-preserving; occasionally valid-only or strided.
            let padding = if kernel == 1 || rng.gen_bool(0.8) { kernel / 2 } else { 0 };
            let stride = if rng.gen_bool(0.8) { 1 } else { 2 };
            let p = ConvParams { filters: random_channels(rng, max_channels), kernel, stride, padding };
            let oh = p.window().out_extent(h);
            let ow = p.window().out_extent(w);
            // Keep enough spatial extent for splitting to stay interesting.
            if oh < 4 || ow < 4 {
                return None;
            }
            Some((LayerKind::Conv(p), (p.filters, oh, ow)))
        }
        "pool" => {
            let (window, stride) = *weighted(rng, &[((2usize, 2usize), 4), ((3, 2), 1)]);
            let p = PoolParams {
                window,
                stride,
                padding: 0,
                kind: if rng.gen_bool(0.5) { PoolKind::Max } else { PoolKind::Average },
            };
            let oh = p.window_spec().out_extent(h);
            let ow = p.window_spec().out_extent(w);
            if oh < 4 || ow < 4 {
                return None;
            }
            Some((LayerKind::Pool(p), (c, oh, ow)))
        }
        "relu" => Some((LayerKind::Relu, (c, h, w))),
        "bn-local" => Some((LayerKind::BatchNormLocal, (c, h, w))),
        "bn-spatial" => Some((LayerKind::BatchNormSpatial, (c, h, w))),
        _ => unreachable!(),
    }
}

/// A random single-source, single-sink network: input, a chain of hidden
/// layers (possibly containing one two-branch join), output. Hidden kinds
/// cover convolution (kernel 1/3/5/7, stride 1/2), pooling, rectification,
/// and both batch-norm variants.
pub fn random_network(rng: &mut impl Rng, limits: &SynthLimits) -> NetworkGraph {
    let hidden = rng.gen_range(limits.min_layers..=limits.max_layers);
    let n = rng.gen_range(1..=limits.max_samples);
    let c0 = random_channels(rng, limits.max_channels);
    let h0 = random_extent(rng, limits.max_spatial);
    let w0 = random_extent(rng, limits.max_spatial);

    let mut layers = vec![LayerSpec {
        id: "in".to_string(),
        kind: LayerKind::Input(TensorShape::new(n, c0, h0, w0)),
        parents: Vec::new(),
    }];
    let mut tip = "in".to_string();
    let (mut c, mut h, mut w) = (c0, h0, w0);

    let mut made = 0;
    let mut serial = 0;
    // No second batch norm until a nonlinearity (relu or max pool) breaks
    // the affine chain; see `sample_layer`.
    let mut bn_blocked = false;
    while made < hidden {
        // A residual two-branch join: conv / identity-ish branches summed.
        if limits.allow_branches && hidden - made >= 3 && rng.gen_bool(0.15) {
            serial += 1;
            let a = format!("l{serial}a");
            let kernel = *weighted(rng, &[(1usize, 1), (3, 2)]);
            if kernel <= h.min(w) {
                layers.push(LayerSpec {
                    id: a.clone(),
                    kind: LayerKind::Conv(ConvParams {
                        filters: c,
                        kernel,
                        stride: 1,
                        padding: kernel / 2,
                    }),
                    parents: vec![tip.clone()],
                });
                let b = format!("l{serial}b");
                layers.push(LayerSpec {
                    id: b.clone(),
                    kind: LayerKind::Relu,
                    parents: vec![tip.clone()],
                });
                let join = format!("l{serial}j");
                layers.push(LayerSpec {
                    id: join.clone(),
                    kind: LayerKind::Relu,
                    parents: vec![a, b],
                });
                tip = join;
                made += 3;
                // The join is a rectification.
                bn_blocked = false;
                continue;
            }
        }

        if let Some((kind, (nc, nh, nw))) =
            sample_layer(rng, c, h, w, limits.max_channels, bn_blocked)
        {
            serial += 1;
            let id = format!("l{serial}");
            bn_blocked = match &kind {
                LayerKind::BatchNormLocal | LayerKind::BatchNormSpatial => true,
                LayerKind::Relu => false,
                LayerKind::Pool(p) if p.kind == PoolKind::Max => false,
                _ => bn_blocked,
            };
            layers.push(LayerSpec { id: id.clone(), kind, parents: vec![tip.clone()] });
            tip = id;
            (c, h, w) = (nc, nh, nw);
            made += 1;
        }
    }

    layers.push(LayerSpec { id: "out".to_string(), kind: LayerKind::Output, parents: vec![tip] });
    NetworkGraph::from_layers(layers).expect("generated networks are valid by construction")
}

/// Random trainable state for a network: filters and batch-norm shifts in
/// [-1, 1), scales in [0.5, 1.5) to stay clear of degenerate zero scale.
pub fn random_params(rng: &mut impl Rng, g: &NetworkGraph) -> Params {
    let mut params = Params::default();
    for idx in 0..g.len() {
        let layer = g.layer(idx);
        let input = g.shapes(idx).input;
        match &layer.kind {
            LayerKind::Conv(p) => {
                let shape = TensorShape::new(p.filters, input.c, p.kernel, p.kernel);
                params.conv.insert(layer.id.clone(), random_tensor(rng, shape));
            }
            LayerKind::BatchNormLocal | LayerKind::BatchNormSpatial => {
                let shape = TensorShape::new(1, input.c, 1, 1);
                let mut gamma = Tensor4::zeros(shape);
                for v in &mut gamma.data {
                    *v = rng.gen_range(0.5..1.5);
                }
                let beta = random_tensor(rng, shape);
                params.bn.insert(layer.id.clone(), BnParams { gamma, beta });
            }
            _ => {}
        }
    }
    params
}

/// Input batch and loss-gradient seed sized for the network.
pub fn random_step_data(rng: &mut impl Rng, g: &NetworkGraph) -> (Tensor4, Tensor4) {
    let source = g.sources()[0];
    let sink = g.sinks()[0];
    (
        random_tensor(rng, g.shapes(source).input),
        random_tensor(rng, g.shapes(sink).output),
    )
}

/// A cost table covering exactly the keys the given candidate distributions
/// will look up, with kernel times drawn log-uniformly from
/// `[floor, floor * spread)`. Shared keys get one consistent time.
pub fn random_cost_table(
    rng: &mut impl Rng,
    g: &NetworkGraph,
    candidates: &[Vec<LayerDistribution>],
    floor: f64,
    spread: f64,
) -> CostTable {
    let mut table = CostTable::default();
    for (idx, cands) in candidates.iter().enumerate() {
        for d in cands {
            let Ok(keys) = cost_keys(g, idx, d) else { continue };
            for key in keys {
                if !table.contains(&key) {
                    let t = floor * spread.powf(rng.gen_range(0.0..1.0));
                    table.insert(key, t);
                }
            }
        }
    }
    table
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::{serial_step, uniform_strategies, verify_strategy};
    use crate::simexec::SimOptions;

    #[test]
    fn generation_is_deterministic_per_seed() {
        for seed in [0u64, 1, 42, 2048] {
            let mut a = rng_from_seed(seed);
            let mut b = rng_from_seed(seed);
            let ga = random_network(&mut a, &SynthLimits::default());
            let gb = random_network(&mut b, &SynthLimits::default());
            assert_eq!(ga.len(), gb.len());
            for i in 0..ga.len() {
                assert_eq!(ga.layer(i).id, gb.layer(i).id);
                assert_eq!(ga.layer(i).kind, gb.layer(i).kind);
                assert_eq!(ga.shapes(i), gb.shapes(i));
            }
            assert_eq!(
                random_tensor(&mut a, TensorShape::new(1, 2, 3, 4)).data,
                random_tensor(&mut b, TensorShape::new(1, 2, 3, 4)).data,
            );
        }
    }

    #[test]
    fn networks_respect_the_declared_limits() {
        let limits = SynthLimits::default();
        let mut rng = rng_from_seed(7);
        for _ in 0..200 {
            let g = random_network(&mut rng, &limits);
            let hidden = g.len() - 2;
            assert!((limits.min_layers..=limits.max_layers).contains(&hidden), "{hidden} hidden");
            assert_eq!(g.sources().len(), 1);
            assert_eq!(g.sinks().len(), 1);
            for i in 0..g.len() {
                let s = g.shapes(i);
                for shape in [s.input, s.output] {
                    assert!(shape.n <= limits.max_samples);
                    assert!(shape.c <= limits.max_channels);
                    assert!(shape.h <= limits.max_spatial);
                    assert!(shape.w <= limits.max_spatial);
                    assert!(shape.count() > 0);
                }
                if let LayerKind::Conv(p) = &g.layer(i).kind {
                    assert!([1, 3, 5, 7].contains(&p.kernel));
                    assert!([1, 2].contains(&p.stride));
                }
            }
        }
    }

    #[test]
    fn generated_networks_execute_and_verify() {
        // A smoke pass of the full pipeline on a handful of seeds; the
        // acceptance suite does this at scale.
        let limits = SynthLimits::default();
        for seed in 0..5u64 {
            let mut rng = rng_from_seed(seed);
            let g = random_network(&mut rng, &limits);
            let params = random_params(&mut rng, &g);
            let (input, sink_grad) = random_step_data(&mut rng, &g);

            // Serial reference runs.
            serial_step(&g, &params, &input, &sink_grad, None).unwrap();

            // At least the single-rank strategy exists and verifies.
            let strategies = uniform_strategies(&g, 2);
            assert!(!uniform_strategies(&g, 1).is_empty());
            for dists in strategies.iter().take(2) {
                let out = verify_strategy(
                    &g,
                    dists,
                    &params,
                    &input,
                    &sink_grad,
                    &SimOptions::default(),
                )
                .unwrap();
                assert!(out.max_rel <= 1e-9, "seed {seed}: {}", out.max_rel);
            }
        }
    }

    #[test]
    fn random_cost_tables_cover_requested_candidates() {
        let mut rng = rng_from_seed(11);
        let g = random_network(&mut rng, &SynthLimits::default());
        let cands: Vec<Vec<LayerDistribution>> = {
            let per_layer: Vec<Vec<LayerDistribution>> = (0..g.len())
                .map(|i| {
                    uniform_strategies(&g, 4)
                        .into_iter()
                        .map(|mut dists| dists.swap_remove(i))
                        .collect()
                })
                .collect();
            per_layer
        };
        let table = random_cost_table(&mut rng, &g, &cands, 1e-5, 100.0);
        for (idx, layer_cands) in cands.iter().enumerate() {
            for d in layer_cands {
                for key in cost_keys(&g, idx, d).unwrap() {
                    assert!(table.contains(&key), "missing {key}");
                    assert!(table.lookup(&key).unwrap() >= 1e-5);
                }
            }
        }
    }
}
