//! Numeric layer kernels over tile-backed tensor regions.
//!
//! All kernels address tensors in *global* coordinates and are restricted to
//! an explicit output (or input) region. A [`Tile`] stores one rank's
//! rectangular slice of a global tensor — its own block plus any halo rows
//! and columns — and answers reads outside the global tensor with zero, which
//! is exactly the zero-padding convention of the windowed layers. Running a
//! kernel over the full region on a full-tensor tile *is* the serial
//! computation: the parallel executor and the serial reference share every
//! arithmetic path, so a single-rank run reproduces the serial result
//! bit for bit.
//!
//! Accumulation orders are fixed (documented per kernel) so results are
//! deterministic for a given partitioning.

use std::ops::Range;

use crate::dist::Box3;
use crate::netgraph::{PoolKind, TensorShape, Window};

/// Epsilon added to the variance before the batch-norm square root.
pub const BN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Dense tensors and tiles
// ---------------------------------------------------------------------------

/// Dense row-major (n, c, h, w) tensor. Used for weights and their
/// gradients, which are replicated on every rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub shape: TensorShape,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: TensorShape) -> Self {
        Tensor4 { shape, data: vec![0.0; shape.count() as usize] }
    }

    pub fn from_fn(shape: TensorShape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Tensor4::zeros(shape);
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        let idx = t.index(n, c, h, w);
                        t.data[idx] = f(n, c, h, w);
                    }
                }
            }
        }
        t
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.shape.n && c < self.shape.c && h < self.shape.h && w < self.shape.w);
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    #[inline]
    pub fn add(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] += v;
    }
}

/// One rank's slice of a global tensor: a contiguous sample range, all
/// channels, and a rectangular row/column range (the rank's block widened by
/// its halo). Reads are in global coordinates; positions outside the global
/// tensor read as zero (padding), while positions inside the global tensor
/// but outside the tile are a caller bug.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    global: TensorShape,
    n: Range<usize>,
    h: Range<usize>,
    w: Range<usize>,
    data: Vec<f64>,
}

impl Tile {
    pub fn new(global: TensorShape, n: Range<usize>, h: Range<usize>, w: Range<usize>) -> Self {
        debug_assert!(n.end <= global.n && h.end <= global.h && w.end <= global.w);
        let len = n.len() * global.c * h.len() * w.len();
        Tile { global, n, h, w, data: vec![0.0; len] }
    }

    /// A tile covering the whole tensor — the serial case.
    pub fn full(global: TensorShape) -> Self {
        Tile::new(global, 0..global.n, 0..global.h, 0..global.w)
    }

    pub fn global_shape(&self) -> TensorShape {
        self.global
    }

    pub fn bounds(&self) -> Box3 {
        Box3 { n: self.n.clone(), h: self.h.clone(), w: self.w.clone() }
    }

    #[inline]
    fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(
            self.n.contains(&n) && c < self.global.c && self.h.contains(&h) && self.w.contains(&w),
            "global ({n},{c},{h},{w}) outside tile {:?}/{:?}/{:?}",
            self.n,
            self.h,
            self.w
        );
        ((n - self.n.start) * self.global.c + c) * self.h.len() * self.w.len()
            + (h - self.h.start) * self.w.len()
            + (w - self.w.start)
    }

    /// Read at global coordinates; zero outside the global tensor.
    #[inline]
    pub fn get(&self, n: usize, c: usize, h: isize, w: isize) -> f64 {
        if h < 0 || w < 0 || h >= self.global.h as isize || w >= self.global.w as isize {
            return 0.0;
        }
        self.data[self.offset(n, c, h as usize, w as usize)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    #[inline]
    pub fn add(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.offset(n, c, h, w);
        self.data[i] += v;
    }

    /// Copies a rectangle (all channels) out in (n, c, h, w) order — the
    /// wire format of halo and shuffle messages.
    pub fn extract(&self, span: &Box3) -> Vec<f64> {
        let mut out = Vec::with_capacity(span.elements() as usize * self.global.c);
        for n in span.n.clone() {
            for c in 0..self.global.c {
                for h in span.h.clone() {
                    for w in span.w.clone() {
                        out.push(self.data[self.offset(n, c, h, w)]);
                    }
                }
            }
        }
        out
    }

    /// Writes a rectangle previously produced by [`Tile::extract`].
    pub fn splice(&mut self, span: &Box3, data: &[f64]) {
        let mut it = data.iter();
        for n in span.n.clone() {
            for c in 0..self.global.c {
                for h in span.h.clone() {
                    for w in span.w.clone() {
                        let i = self.offset(n, c, h, w);
                        self.data[i] = *it.next().expect("payload shorter than span");
                    }
                }
            }
        }
        debug_assert!(it.next().is_none(), "payload longer than span");
    }

    /// Adds a rectangle into the tile (gradient accumulation from several
    /// consumers).
    pub fn splice_add(&mut self, span: &Box3, data: &[f64]) {
        let mut it = data.iter();
        for n in span.n.clone() {
            for c in 0..self.global.c {
                for h in span.h.clone() {
                    for w in span.w.clone() {
                        let i = self.offset(n, c, h, w);
                        self.data[i] += *it.next().expect("payload shorter than span");
                    }
                }
            }
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Forward convolution over an output region. For each output element the
/// inner accumulation runs over (channel, window row, window column) in that
/// order. Weights are laid out (filter, channel, row, column).
pub fn conv_fp(x: &Tile, weights: &Tensor4, win: Window, out_box: &Box3, y: &mut Tile) {
    let filters = weights.shape.n;
    let channels = weights.shape.c;
    let (s, p) = (win.stride as isize, win.padding as isize);
    for k in out_box.n.clone() {
        for f in 0..filters {
            for i in out_box.h.clone() {
                for j in out_box.w.clone() {
                    let mut acc = 0.0;
                    for c in 0..channels {
                        for a in 0..weights.shape.h {
                            for b in 0..weights.shape.w {
                                let r = s * i as isize + a as isize - p;
                                let q = s * j as isize + b as isize - p;
                                acc += x.get(k, c, r, q) * weights.get(f, c, a, b);
                            }
                        }
                    }
                    y.set(k, f, i, j, acc);
                }
            }
        }
    }
}

/// Convolution weight gradient over an output region, accumulated into `dw`.
/// Each (filter, channel, row, column) entry sums its products over
/// (sample, output row, output column) in that order; partial sums from
/// different ranks are later combined by an allreduce.
pub fn conv_bp_weights(x: &Tile, dy: &Tile, win: Window, out_box: &Box3, dw: &mut Tensor4) {
    let filters = dw.shape.n;
    let channels = dw.shape.c;
    let (s, p) = (win.stride as isize, win.padding as isize);
    for f in 0..filters {
        for c in 0..channels {
            for a in 0..dw.shape.h {
                for b in 0..dw.shape.w {
                    let mut acc = 0.0;
                    for k in out_box.n.clone() {
                        for i in out_box.h.clone() {
                            for j in out_box.w.clone() {
                                let r = s * i as isize + a as isize - p;
                                let q = s * j as isize + b as isize - p;
                                acc += dy.get(k, f, i as isize, j as isize) * x.get(k, c, r, q);
                            }
                        }
                    }
                    dw.add(f, c, a, b, acc);
                }
            }
        }
    }
}

/// Convolution data gradient over an input region. For input element (i, j),
/// the covering output positions are those (a, b) window offsets with
/// `(i + padding - a) % stride == 0`; the accumulation runs over
/// (filter, window row, window column). Reads of `dy` beyond the output
/// tensor return zero.
pub fn conv_bp_data(dy: &Tile, weights: &Tensor4, win: Window, in_box: &Box3, dx: &mut Tile) {
    let filters = weights.shape.n;
    let channels = weights.shape.c;
    let (s, p) = (win.stride as isize, win.padding as isize);
    for k in in_box.n.clone() {
        for c in 0..channels {
            for i in in_box.h.clone() {
                for j in in_box.w.clone() {
                    let mut acc = 0.0;
                    for f in 0..filters {
                        for a in 0..weights.shape.h {
                            let ti = i as isize + p - a as isize;
                            if ti < 0 || ti % s != 0 {
                                continue;
                            }
                            for b in 0..weights.shape.w {
                                let tj = j as isize + p - b as isize;
                                if tj < 0 || tj % s != 0 {
                                    continue;
                                }
                                acc += dy.get(k, f, ti / s, tj / s) * weights.get(f, c, a, b);
                            }
                        }
                    }
                    dx.set(k, c, i, j, acc);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Members of a pooling window that fall inside the tensor. Pooling windows
/// clamp at the tensor edge: padding positions contribute nothing, and the
/// average divides by the in-bounds member count.
fn window_members(
    win: Window,
    shape: TensorShape,
    i: usize,
    j: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let (s, p) = (win.stride as isize, win.padding as isize);
    let size = win.size;
    let (h, w) = (shape.h as isize, shape.w as isize);
    let base_r = s * i as isize - p;
    let base_q = s * j as isize - p;
    (0..size).flat_map(move |a| {
        (0..size).filter_map(move |b| {
            let r = base_r + a as isize;
            let q = base_q + b as isize;
            if r < 0 || q < 0 || r >= h || q >= w {
                None
            } else {
                Some((r as usize, q as usize))
            }
        })
    })
}

/// Forward pooling over an output region. Max pooling scans window members
/// in row-major order; ties keep the first maximum, and the backward pass
/// re-derives the same argmax deterministically.
pub fn pool_fp(x: &Tile, win: Window, kind: PoolKind, out_box: &Box3, y: &mut Tile) {
    let shape = x.global_shape();
    for k in out_box.n.clone() {
        for c in 0..shape.c {
            for i in out_box.h.clone() {
                for j in out_box.w.clone() {
                    let mut members = window_members(win, shape, i, j);
                    let v = match kind {
                        PoolKind::Max => {
                            let (r0, q0) = members.next().expect("window clamps non-empty");
                            let mut best = x.get(k, c, r0 as isize, q0 as isize);
                            for (r, q) in members {
                                let v = x.get(k, c, r as isize, q as isize);
                                if v > best {
                                    best = v;
                                }
                            }
                            best
                        }
                        PoolKind::Average => {
                            let mut sum = 0.0;
                            let mut count = 0u32;
                            for (r, q) in members {
                                sum += x.get(k, c, r as isize, q as isize);
                                count += 1;
                            }
                            sum / f64::from(count)
                        }
                    };
                    y.set(k, c, i, j, v);
                }
            }
        }
    }
}

/// Backward pooling over an input region. Gathers from every covering
/// window: max pooling re-derives the window argmax (first maximum in
/// row-major scan order) and takes the gradient only if this element won;
/// average pooling takes `dy / member_count`. Because each input element
/// gathers over covering windows in a fixed order, results do not depend on
/// the partitioning at all.
pub fn pool_bp(x: &Tile, dy: &Tile, win: Window, kind: PoolKind, in_box: &Box3, dx: &mut Tile) {
    let in_shape = x.global_shape();
    let out_shape = dy.global_shape();
    for k in in_box.n.clone() {
        for c in 0..in_shape.c {
            for i in in_box.h.clone() {
                for j in in_box.w.clone() {
                    let (olo_h, ohi_h) = win.output_span(i, i);
                    let (olo_w, ohi_w) = win.output_span(j, j);
                    let mut acc = 0.0;
                    for oi in olo_h.max(0)..=ohi_h.min(out_shape.h as isize - 1) {
                        for oj in olo_w.max(0)..=ohi_w.min(out_shape.w as isize - 1) {
                            let (oi, oj) = (oi as usize, oj as usize);
                            match kind {
                                PoolKind::Max => {
                                    let mut members = window_members(win, in_shape, oi, oj);
                                    let (r0, q0) = members.next().expect("non-empty window");
                                    let mut best = (r0, q0);
                                    let mut best_v = x.get(k, c, r0 as isize, q0 as isize);
                                    for (r, q) in members {
                                        let v = x.get(k, c, r as isize, q as isize);
                                        if v > best_v {
                                            best_v = v;
                                            best = (r, q);
                                        }
                                    }
                                    if best == (i, j) {
                                        acc += dy.get(k, c, oi as isize, oj as isize);
                                    }
                                }
                                PoolKind::Average => {
                                    let count = window_members(win, in_shape, oi, oj).count();
                                    acc += dy.get(k, c, oi as isize, oj as isize) / count as f64;
                                }
                            }
                        }
                    }
                    dx.set(k, c, i, j, acc);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Rectifier
// ---------------------------------------------------------------------------

pub fn relu_fp(x: &Tile, region: &Box3, y: &mut Tile) {
    let channels = x.global_shape().c;
    for k in region.n.clone() {
        for c in 0..channels {
            for i in region.h.clone() {
                for j in region.w.clone() {
                    let v = x.get(k, c, i as isize, j as isize);
                    y.set(k, c, i, j, if v > 0.0 { v } else { 0.0 });
                }
            }
        }
    }
}

pub fn relu_bp(x: &Tile, dy: &Tile, region: &Box3, dx: &mut Tile) {
    let channels = x.global_shape().c;
    for k in region.n.clone() {
        for c in 0..channels {
            for i in region.h.clone() {
                for j in region.w.clone() {
                    let g = if x.get(k, c, i as isize, j as isize) > 0.0 {
                        dy.get(k, c, i as isize, j as isize)
                    } else {
                        0.0
                    };
                    dx.set(k, c, i, j, g);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Mean and (non-negative) variance from raw first/second moments.
pub fn stats_from_sums(sum: f64, sumsq: f64, m: f64) -> (f64, f64) {
    let mean = sum / m;
    let var = (sumsq / m - mean * mean).max(0.0);
    (mean, var)
}

/// Per-channel (sum, sum of squares) over a region — the shard-local
/// moments. Accumulation runs over (sample, row, column) per channel.
pub fn channel_sums(x: &Tile, region: &Box3) -> Vec<(f64, f64)> {
    let channels = x.global_shape().c;
    let mut out = vec![(0.0, 0.0); channels];
    for c in 0..channels {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for k in region.n.clone() {
            for i in region.h.clone() {
                for j in region.w.clone() {
                    let v = x.get(k, c, i as isize, j as isize);
                    sum += v;
                    sumsq += v * v;
                }
            }
        }
        out[c] = (sum, sumsq);
    }
    out
}

/// Per-(sample, channel) moments over a region's rows and columns, keyed by
/// global sample index: `out[k - region.n.start][c]`. These partial sums are
/// combined across the ranks sharing each sample to form per-sample
/// statistics over the full spatial extent.
pub fn sample_channel_sums(x: &Tile, region: &Box3) -> Vec<Vec<(f64, f64)>> {
    let channels = x.global_shape().c;
    let mut out = vec![vec![(0.0, 0.0); channels]; region.n.len()];
    for (kk, k) in region.n.clone().enumerate() {
        for c in 0..channels {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for i in region.h.clone() {
                for j in region.w.clone() {
                    let v = x.get(k, c, i as isize, j as isize);
                    sum += v;
                    sumsq += v * v;
                }
            }
            out[kk][c] = (sum, sumsq);
        }
    }
    out
}

/// Normalizes a region given per-element statistics: `stats(k, c)` returns
/// the (mean, variance) of the element's normalization group.
pub fn bn_normalize(
    x: &Tile,
    region: &Box3,
    stats: &dyn Fn(usize, usize) -> (f64, f64),
    gamma: &Tensor4,
    beta: &Tensor4,
    y: &mut Tile,
) {
    let channels = x.global_shape().c;
    for k in region.n.clone() {
        for c in 0..channels {
            let (mean, var) = stats(k, c);
            let inv = 1.0 / (var + BN_EPS).sqrt();
            let g = gamma.get(0, c, 0, 0);
            let b = beta.get(0, c, 0, 0);
            for i in region.h.clone() {
                for j in region.w.clone() {
                    let xhat = (x.get(k, c, i as isize, j as isize) - mean) * inv;
                    y.set(k, c, i, j, g * xhat + b);
                }
            }
        }
    }
}

/// Local partial gradients of the scale/shift parameters over a region:
/// per channel, `(sum dy * xhat, sum dy)`. Globally these are summed over
/// every rank.
pub fn bn_param_grads(
    x: &Tile,
    dy: &Tile,
    region: &Box3,
    stats: &dyn Fn(usize, usize) -> (f64, f64),
) -> (Vec<f64>, Vec<f64>) {
    let channels = x.global_shape().c;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for c in 0..channels {
        for k in region.n.clone() {
            let (mean, var) = stats(k, c);
            let inv = 1.0 / (var + BN_EPS).sqrt();
            for i in region.h.clone() {
                for j in region.w.clone() {
                    let g = dy.get(k, c, i as isize, j as isize);
                    let xhat = (x.get(k, c, i as isize, j as isize) - mean) * inv;
                    dgamma[c] += g * xhat;
                    dbeta[c] += g;
                }
            }
        }
    }
    (dgamma, dbeta)
}

/// Local partial sums needed by the batch-norm data gradient: per channel,
/// `(sum dy, sum dy * xhat)` over the region, keyed like
/// [`sample_channel_sums`]. The caller combines them over each
/// normalization group before calling [`bn_backward_data`].
pub fn bn_backward_sums(
    x: &Tile,
    dy: &Tile,
    region: &Box3,
    stats: &dyn Fn(usize, usize) -> (f64, f64),
) -> Vec<Vec<(f64, f64)>> {
    let channels = x.global_shape().c;
    let mut out = vec![vec![(0.0, 0.0); channels]; region.n.len()];
    for (kk, k) in region.n.clone().enumerate() {
        for c in 0..channels {
            let (mean, var) = stats(k, c);
            let inv = 1.0 / (var + BN_EPS).sqrt();
            let mut s_dy = 0.0;
            let mut s_dy_xhat = 0.0;
            for i in region.h.clone() {
                for j in region.w.clone() {
                    let g = dy.get(k, c, i as isize, j as isize);
                    let xhat = (x.get(k, c, i as isize, j as isize) - mean) * inv;
                    s_dy += g;
                    s_dy_xhat += g * xhat;
                }
            }
            out[kk][c] = (s_dy, s_dy_xhat);
        }
    }
    out
}

/// Batch-norm data gradient over a region. `group(k, c)` returns the
/// normalization group's `(sum dy, sum dy * xhat, element count)`; the
/// statistics are treated as functions of the input, giving the standard
/// training-mode gradient
/// `dx = gamma / sigma * (dy - sum_dy / m - xhat * sum_dy_xhat / m)`.
pub fn bn_backward_data(
    x: &Tile,
    dy: &Tile,
    region: &Box3,
    stats: &dyn Fn(usize, usize) -> (f64, f64),
    group: &dyn Fn(usize, usize) -> (f64, f64, f64),
    gamma: &Tensor4,
    dx: &mut Tile,
) {
    let channels = x.global_shape().c;
    for k in region.n.clone() {
        for c in 0..channels {
            let (mean, var) = stats(k, c);
            let inv = 1.0 / (var + BN_EPS).sqrt();
            let (s_dy, s_dy_xhat, m) = group(k, c);
            let g = gamma.get(0, c, 0, 0);
            for i in region.h.clone() {
                for j in region.w.clone() {
                    let xhat = (x.get(k, c, i as isize, j as isize) - mean) * inv;
                    let gy = dy.get(k, c, i as isize, j as isize);
                    dx.set(k, c, i, j, g * inv * (gy - s_dy / m - xhat * s_dy_xhat / m));
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn full_box(shape: TensorShape) -> Box3 {
        Box3 { n: 0..shape.n, h: 0..shape.h, w: 0..shape.w }
    }

    fn seeded_tile(shape: TensorShape, seed: u64) -> Tile {
        let mut t = Tile::full(shape);
        let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
        for v in t.data_mut() {
            // xorshift64*, mapped to [-1, 1)
            state ^= state >> 12;
            state ^= state << 25;
            state ^= state >> 27;
            let r = state.wrapping_mul(0x2545_f491_4f6c_dd1d);
            *v = (r >> 11) as f64 / (1u64 << 52) as f64 - 1.0;
        }
        t
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn tile_reads_zero_outside_global_bounds() {
        let mut t = Tile::full(TensorShape::new(1, 1, 2, 2));
        t.set(0, 0, 0, 0, 5.0);
        assert_eq!(t.get(0, 0, -1, 0), 0.0);
        assert_eq!(t.get(0, 0, 0, -3), 0.0);
        assert_eq!(t.get(0, 0, 2, 0), 0.0);
        assert_eq!(t.get(0, 0, 0, 0), 5.0);
    }

    #[test]
    fn tile_extract_splice_round_trip() {
        let shape = TensorShape::new(2, 3, 4, 4);
        let src = seeded_tile(shape, 7);
        let span = Box3 { n: 0..2, h: 1..3, w: 2..4 };
        let payload = src.extract(&span);
        assert_eq!(payload.len(), (span.elements() as usize) * shape.c);

        let mut dst = Tile::full(shape);
        dst.splice(&span, &payload);
        for n in span.n.clone() {
            for c in 0..shape.c {
                for h in span.h.clone() {
                    for w in span.w.clone() {
                        assert_eq!(
                            dst.get(n, c, h as isize, w as isize),
                            src.get(n, c, h as isize, w as isize)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv_of_ones_counts_window_overlap() {
        // 3x3 ones kernel over a 3x3 ones image with same padding: each
        // output counts the in-bounds window members.
        let shape = TensorShape::new(1, 1, 3, 3);
        let mut x = Tile::full(shape);
        for h in 0..3 {
            for w in 0..3 {
                x.set(0, 0, h, w, 1.0);
            }
        }
        let w = Tensor4::from_fn(TensorShape::new(1, 1, 3, 3), |_, _, _, _| 1.0);
        let win = Window { size: 3, stride: 1, padding: 1 };
        let mut y = Tile::full(shape);
        conv_fp(&x, &w, win, &full_box(shape), &mut y);

        let expect = [[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(y.get(0, 0, i as isize, j as isize), expect[i][j]);
            }
        }
    }

    #[test]
    fn unit_kernel_is_identity() {
        let shape = TensorShape::new(2, 2, 4, 4);
        let x = seeded_tile(shape, 3);
        let w = Tensor4::from_fn(TensorShape::new(2, 2, 1, 1), |f, c, _, _| {
            if f == c { 1.0 } else { 0.0 }
        });
        let win = Window { size: 1, stride: 1, padding: 0 };
        let mut y = Tile::full(shape);
        conv_fp(&x, &w, win, &full_box(shape), &mut y);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn strided_conv_picks_every_other_window() {
        // 1x4 row [1, 2, 3, 4], kernel [1, 1, 1] as a 3x1... use 4x4 with a
        // vertical stride-2: verify against hand-expanded sums.
        let shape = TensorShape::new(1, 1, 4, 1);
        let mut x = Tile::full(shape);
        for h in 0..4 {
            x.set(0, 0, h, 0, (h + 1) as f64);
        }
        // 3x3 kernel but only the centre column is live, so it acts 1-D.
        let w = Tensor4::from_fn(TensorShape::new(1, 1, 3, 3), |_, _, _, b| {
            if b == 1 { 1.0 } else { 0.0 }
        });
        let win = Window { size: 3, stride: 2, padding: 1 };
        let out_shape = TensorShape::new(1, 1, win.out_extent(4), win.out_extent(1));
        assert_eq!(out_shape.h, 2);
        let mut y = Tile::full(out_shape);
        conv_fp(&x, &w, win, &full_box(out_shape), &mut y);
        // Output 0 reads rows -1..1 -> 0 + 1 + 2; output 1 reads rows 1..3.
        assert_eq!(y.get(0, 0, 0, 0), 3.0);
        assert_eq!(y.get(0, 0, 1, 0), 9.0);
    }

    #[test]
    fn conv_backward_data_is_adjoint_of_forward() {
        // <conv(x), dy> == <x, conv_bp_data(dy)> for any x, dy: the data
        // gradient must be the exact adjoint of the forward map.
        for (kernel, stride, padding, seed) in
            [(3, 1, 1, 1u64), (3, 2, 1, 2), (5, 1, 2, 3), (5, 2, 0, 4), (1, 1, 0, 5), (7, 2, 3, 6)]
        {
            let win = Window { size: kernel, stride, padding };
            let in_shape = TensorShape::new(2, 2, 9, 8);
            let out_shape = TensorShape::new(2, 3, win.out_extent(9), win.out_extent(8));
            let weights = {
                let shape = TensorShape::new(3, 2, kernel, kernel);
                let t = seeded_tile(shape, seed * 11 + 1);
                Tensor4 { shape, data: t.data().to_vec() }
            };
            let x = seeded_tile(in_shape, seed * 11 + 2);
            let dy = seeded_tile(out_shape, seed * 11 + 3);

            let mut y = Tile::full(out_shape);
            conv_fp(&x, &weights, win, &full_box(out_shape), &mut y);
            let mut dx = Tile::full(in_shape);
            conv_bp_data(&dy, &weights, win, &full_box(in_shape), &mut dx);

            let lhs = dot(y.data(), dy.data());
            let rhs = dot(x.data(), dx.data());
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0),
                "K={kernel} S={stride} P={padding}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn conv_backward_weights_is_adjoint_in_the_weights() {
        // <conv(x; w), dy> == <w, conv_bp_weights(x, dy)>.
        for (kernel, stride, padding, seed) in [(3, 1, 1, 1u64), (3, 2, 1, 2), (5, 2, 2, 3)] {
            let win = Window { size: kernel, stride, padding };
            let in_shape = TensorShape::new(2, 2, 8, 8);
            let out_shape = TensorShape::new(2, 2, win.out_extent(8), win.out_extent(8));
            let wshape = TensorShape::new(2, 2, kernel, kernel);
            let weights = {
                let t = seeded_tile(wshape, seed * 17 + 1);
                Tensor4 { shape: wshape, data: t.data().to_vec() }
            };
            let x = seeded_tile(in_shape, seed * 17 + 2);
            let dy = seeded_tile(out_shape, seed * 17 + 3);

            let mut y = Tile::full(out_shape);
            conv_fp(&x, &weights, win, &full_box(out_shape), &mut y);
            let mut dw = Tensor4::zeros(wshape);
            conv_bp_weights(&x, &dy, win, &full_box(out_shape), &mut dw);

            let lhs = dot(y.data(), dy.data());
            let rhs = dot(&weights.data, &dw.data);
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0),
                "K={kernel} S={stride} P={padding}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn region_restricted_conv_matches_full_run() {
        // Computing disjoint regions separately must tile the full result.
        let win = Window { size: 3, stride: 1, padding: 1 };
        let in_shape = TensorShape::new(1, 2, 6, 6);
        let out_shape = TensorShape::new(1, 2, 6, 6);
        let wshape = TensorShape::new(2, 2, 3, 3);
        let weights = {
            let t = seeded_tile(wshape, 41);
            Tensor4 { shape: wshape, data: t.data().to_vec() }
        };
        let x = seeded_tile(in_shape, 42);

        let mut whole = Tile::full(out_shape);
        conv_fp(&x, &weights, win, &full_box(out_shape), &mut whole);

        let mut pieced = Tile::full(out_shape);
        for (hr, wr) in [(0..3, 0..6), (3..6, 0..2), (3..6, 2..6)] {
            let region = Box3 { n: 0..1, h: hr, w: wr };
            conv_fp(&x, &weights, win, &region, &mut pieced);
        }
        assert_eq!(whole.data(), pieced.data());
    }

    #[test]
    fn max_pool_forward_and_backward_hand_case() {
        // 2x2 window, stride 2 on [[1,2],[3,4]]: max 4, average 2.5.
        let shape = TensorShape::new(1, 1, 2, 2);
        let mut x = Tile::full(shape);
        x.set(0, 0, 0, 0, 1.0);
        x.set(0, 0, 0, 1, 2.0);
        x.set(0, 0, 1, 0, 3.0);
        x.set(0, 0, 1, 1, 4.0);
        let win = Window { size: 2, stride: 2, padding: 0 };
        let out_shape = TensorShape::new(1, 1, 1, 1);

        let mut y = Tile::full(out_shape);
        pool_fp(&x, win, PoolKind::Max, &full_box(out_shape), &mut y);
        assert_eq!(y.get(0, 0, 0, 0), 4.0);

        let mut dy = Tile::full(out_shape);
        dy.set(0, 0, 0, 0, 1.0);
        let mut dx = Tile::full(shape);
        pool_bp(&x, &dy, win, PoolKind::Max, &full_box(shape), &mut dx);
        assert_eq!(dx.get(0, 0, 0, 0), 0.0);
        assert_eq!(dx.get(0, 0, 1, 1), 1.0);

        let mut y = Tile::full(out_shape);
        pool_fp(&x, win, PoolKind::Average, &full_box(out_shape), &mut y);
        assert_eq!(y.get(0, 0, 0, 0), 2.5);
        let mut dx = Tile::full(shape);
        pool_bp(&x, &dy, win, PoolKind::Average, &full_box(shape), &mut dx);
        for h in 0..2 {
            for w in 0..2 {
                assert_eq!(dx.get(0, 0, h, w), 0.25);
            }
        }
    }

    #[test]
    fn max_pool_tie_goes_to_first_in_scan_order() {
        let shape = TensorShape::new(1, 1, 2, 2);
        let mut x = Tile::full(shape);
        for h in 0..2 {
            for w in 0..2 {
                x.set(0, 0, h, w, 1.0);
            }
        }
        let win = Window { size: 2, stride: 2, padding: 0 };
        let out_shape = TensorShape::new(1, 1, 1, 1);
        let mut dy = Tile::full(out_shape);
        dy.set(0, 0, 0, 0, 2.0);
        let mut dx = Tile::full(shape);
        pool_bp(&x, &dy, win, PoolKind::Max, &full_box(shape), &mut dx);
        assert_eq!(dx.get(0, 0, 0, 0), 2.0);
        assert_eq!(dx.get(0, 0, 0, 1), 0.0);
        assert_eq!(dx.get(0, 0, 1, 0), 0.0);
        assert_eq!(dx.get(0, 0, 1, 1), 0.0);
    }

    #[test]
    fn clamped_average_pool_divides_by_member_count() {
        // 3x3 window, padding 1, stride 2 on a 4x4 of ones: the top-left
        // window covers only 4 in-bounds members, so the average is 1 and
        // the gradient spreads as 1/4 per member.
        let shape = TensorShape::new(1, 1, 4, 4);
        let mut x = Tile::full(shape);
        for h in 0..4 {
            for w in 0..4 {
                x.set(0, 0, h, w, 1.0);
            }
        }
        let win = Window { size: 3, stride: 2, padding: 1 };
        let out_extent = win.out_extent(4);
        assert_eq!(out_extent, 2);
        let out_shape = TensorShape::new(1, 1, 2, 2);
        let mut y = Tile::full(out_shape);
        pool_fp(&x, win, PoolKind::Average, &full_box(out_shape), &mut y);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(y.get(0, 0, i, j), 1.0, "clamped average of ones is one");
            }
        }
        let mut dy = Tile::full(out_shape);
        dy.set(0, 0, 0, 0, 1.0);
        let mut dx = Tile::full(shape);
        pool_bp(&x, &dy, win, PoolKind::Average, &full_box(shape), &mut dx);
        assert_eq!(dx.get(0, 0, 0, 0), 0.25);
        assert_eq!(dx.get(0, 0, 2, 2), 0.0);
    }

    #[test]
    fn average_pool_backward_is_adjoint_of_forward() {
        for (size, stride, padding) in [(2, 2, 0), (3, 1, 1), (3, 2, 1)] {
            let win = Window { size, stride, padding };
            let in_shape = TensorShape::new(2, 2, 6, 6);
            let out_shape =
                TensorShape::new(2, 2, win.out_extent(6), win.out_extent(6));
            let x = seeded_tile(in_shape, 91);
            let dy = seeded_tile(out_shape, 92);
            let mut y = Tile::full(out_shape);
            pool_fp(&x, win, PoolKind::Average, &full_box(out_shape), &mut y);
            let mut dx = Tile::full(in_shape);
            pool_bp(&x, &dy, win, PoolKind::Average, &full_box(in_shape), &mut dx);
            let lhs = dot(y.data(), dy.data());
            let rhs = dot(x.data(), dx.data());
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0),
                "window={size} stride={stride} padding={padding}"
            );
        }
    }

    #[test]
    fn relu_forward_and_backward() {
        let shape = TensorShape::new(1, 1, 1, 4);
        let mut x = Tile::full(shape);
        for (w, v) in [-2.0, -0.0, 1.5, 3.0].iter().enumerate() {
            x.set(0, 0, 0, w, *v);
        }
        let mut y = Tile::full(shape);
        relu_fp(&x, &full_box(shape), &mut y);
        assert_eq!(
            (0..4).map(|w| y.get(0, 0, 0, w)).collect::<Vec<_>>(),
            vec![0.0, 0.0, 1.5, 3.0]
        );
        let mut dy = Tile::full(shape);
        for w in 0..4 {
            dy.set(0, 0, 0, w, 1.0);
        }
        let mut dx = Tile::full(shape);
        relu_bp(&x, &dy, &full_box(shape), &mut dx);
        assert_eq!(
            (0..4).map(|w| dx.get(0, 0, 0, w)).collect::<Vec<_>>(),
            vec![0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn bn_normalize_standardizes_each_channel() {
        let shape = TensorShape::new(2, 3, 5, 4);
        let x = seeded_tile(shape, 13);
        let region = full_box(shape);
        let sums = channel_sums(&x, &region);
        let m = (shape.n * shape.h * shape.w) as f64;
        let stats = |_k: usize, c: usize| stats_from_sums(sums[c].0, sums[c].1, m);
        let pshape = TensorShape::new(1, 3, 1, 1);
        let gamma = Tensor4::from_fn(pshape, |_, _, _, _| 1.0);
        let beta = Tensor4::zeros(pshape);
        let mut y = Tile::full(shape);
        bn_normalize(&x, &region, &stats, &gamma, &beta, &mut y);

        let ysums = channel_sums(&y, &region);
        for c in 0..3 {
            let (mean, var) = stats_from_sums(ysums[c].0, ysums[c].1, m);
            assert!(mean.abs() < 1e-12, "channel {c} mean {mean}");
            // Variance shrinks slightly because of the epsilon.
            let (_, xvar) = stats_from_sums(sums[c].0, sums[c].1, m);
            let expect = xvar / (xvar + BN_EPS);
            assert!((var - expect).abs() < 1e-12, "channel {c} var {var} vs {expect}");
        }
    }

    #[test]
    fn bn_backward_is_orthogonal_to_the_normalized_input() {
        // For each channel the data gradient satisfies sum(dx) == 0 exactly,
        // and <dx, xhat> equals the small epsilon correction
        // gamma * inv * sum_dy_xhat * eps / (var + eps) — zero when eps is.
        // Together these pin the full training-mode gradient.
        let shape = TensorShape::new(2, 2, 4, 4);
        let x = seeded_tile(shape, 23);
        let dy = seeded_tile(shape, 29);
        let region = full_box(shape);
        let sums = channel_sums(&x, &region);
        let m = (shape.n * shape.h * shape.w) as f64;
        let stats = |_k: usize, c: usize| stats_from_sums(sums[c].0, sums[c].1, m);
        let bsums = bn_backward_sums(&x, &dy, &region, &stats);
        // Reduce the per-sample rows into per-channel group sums.
        let mut group = vec![(0.0, 0.0); shape.c];
        for row in &bsums {
            for c in 0..shape.c {
                group[c].0 += row[c].0;
                group[c].1 += row[c].1;
            }
        }
        let group_fn = |_k: usize, c: usize| (group[c].0, group[c].1, m);
        let pshape = TensorShape::new(1, 2, 1, 1);
        let gamma = Tensor4::from_fn(pshape, |_, c, _, _| 1.0 + c as f64);
        let mut dx = Tile::full(shape);
        bn_backward_data(&x, &dy, &region, &stats, &group_fn, &gamma, &mut dx);

        for c in 0..shape.c {
            let (mean, var) = stats(0, c);
            let inv = 1.0 / (var + BN_EPS).sqrt();
            let mut s = 0.0;
            let mut sx = 0.0;
            for k in 0..shape.n {
                for i in 0..shape.h {
                    for j in 0..shape.w {
                        let d = dx.get(k, c, i as isize, j as isize);
                        let xhat = (x.get(k, c, i as isize, j as isize) - mean) * inv;
                        s += d;
                        sx += d * xhat;
                    }
                }
            }
            assert!(s.abs() < 1e-10, "channel {c}: sum(dx) = {s}");
            let g = gamma.get(0, c, 0, 0);
            let expect = g * inv * group[c].1 * BN_EPS / (var + BN_EPS);
            assert!(
                (sx - expect).abs() < 1e-10,
                "channel {c}: <dx, xhat> = {sx}, epsilon correction {expect}"
            );
        }
    }

    #[test]
    fn bn_param_grads_match_direct_sums() {
        let shape = TensorShape::new(1, 2, 3, 3);
        let x = seeded_tile(shape, 31);
        let dy = seeded_tile(shape, 37);
        let region = full_box(shape);
        let sums = channel_sums(&x, &region);
        let m = (shape.n * shape.h * shape.w) as f64;
        let stats = |_k: usize, c: usize| stats_from_sums(sums[c].0, sums[c].1, m);
        let (dgamma, dbeta) = bn_param_grads(&x, &dy, &region, &stats);

        for c in 0..shape.c {
            let (mean, var) = stats(0, c);
            let inv = 1.0 / (var + BN_EPS).sqrt();
            let mut eg = 0.0;
            let mut eb = 0.0;
            for i in 0..shape.h {
                for j in 0..shape.w {
                    let g = dy.get(0, c, i as isize, j as isize);
                    eg += g * (x.get(0, c, i as isize, j as isize) - mean) * inv;
                    eb += g;
                }
            }
            assert!((dgamma[c] - eg).abs() < 1e-12);
            assert!((dbeta[c] - eb).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_clamps_at_zero() {
        // A constant input can produce a tiny negative variance from
        // cancellation; the helper must clamp it.
        let (mean, var) = stats_from_sums(3.0 * (0.1 + 0.2), 3.0 * (0.1f64 + 0.2) * (0.1 + 0.2), 3.0);
        assert!((mean - 0.3).abs() < 1e-15);
        assert!(var >= 0.0);
    }
}
