//! Blocked tensor distributions over a virtual rank grid.
//!
//! A layer's tensors are partitioned along the sample dimension and the two
//! spatial dimensions; channels and filters stay replicated. Ranks form a
//! `n_parts x h_parts x w_parts` grid enumerated row-major (sample axis
//! slowest, width fastest). Each partitioned dimension is split into
//! near-equal contiguous blocks, with remainders going to the
//! lowest-coordinate blocks.
//!
//! Windowed layers (convolution and pooling) need a few rows or columns of a
//! neighbour's block — the halo — to evaluate the windows of their own output
//! elements. [`halo_spec`] computes exactly which index rectangles each rank
//! must receive and send, in all eight grid directions, directly from the
//! window's index arithmetic: output position `i` reads input positions
//! `stride*i - padding .. stride*i - padding + size - 1`. Positions outside
//! the tensor are zero padding and are never communicated.
//! [`gradient_halo_spec`] gives the mirror-image exchange of error signals in
//! backpropagation.
//!
//! When consecutive layers use different distributions, [`shuffle_plan`]
//! lists the exact rectangles every rank pair must exchange to redistribute a
//! tensor; elements owned identically under both distributions stay put.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::netgraph::{TensorShape, Window};

#[derive(Debug, thiserror::Error)]
pub enum DistError {
    #[error("rank {rank} out of range for a grid of {total} ranks")]
    RankOutOfRange { rank: usize, total: usize },
    #[error(
        "halo for rank {rank} needs {axis} indices {lo}..={hi}, which reach beyond its \
         immediate neighbours' blocks; the partition is too thin for a window of size {window}"
    )]
    HaloBeyondNeighbour {
        rank: usize,
        axis: char,
        lo: usize,
        hi: usize,
        window: usize,
    },
    #[error("cannot shuffle between tensors of different shape ({from_shape} vs {to_shape})")]
    ShuffleShapeMismatch {
        from_shape: TensorShape,
        to_shape: TensorShape,
    },
    #[error("cannot shuffle between grids of different size ({from} vs {to} ranks)")]
    ShuffleRankMismatch { from: usize, to: usize },
}

// ---------------------------------------------------------------------------
// Grid and blocks
// ---------------------------------------------------------------------------

/// Virtual rank grid. `total()` ranks, enumerated row-major over
/// (sample part, height part, width part).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProcGrid {
    pub n_parts: usize,
    pub h_parts: usize,
    pub w_parts: usize,
}

/// Grid coordinates of one rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCoord {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl ProcGrid {
    pub fn new(n_parts: usize, h_parts: usize, w_parts: usize) -> Self {
        assert!(n_parts >= 1 && h_parts >= 1 && w_parts >= 1, "grid parts must be positive");
        ProcGrid { n_parts, h_parts, w_parts }
    }

    pub fn total(&self) -> usize {
        self.n_parts * self.h_parts * self.w_parts
    }

    pub fn coords(&self, rank: usize) -> GridCoord {
        debug_assert!(rank < self.total());
        let w = rank % self.w_parts;
        let h = (rank / self.w_parts) % self.h_parts;
        let n = rank / (self.w_parts * self.h_parts);
        GridCoord { n, h, w }
    }

    pub fn rank(&self, c: GridCoord) -> usize {
        debug_assert!(c.n < self.n_parts && c.h < self.h_parts && c.w < self.w_parts);
        (c.n * self.h_parts + c.h) * self.w_parts + c.w
    }

    /// The rank one step away in `dir`, if it exists. Halo exchange never
    /// crosses the sample axis, so neighbours share the sample coordinate.
    pub fn neighbour(&self, rank: usize, dir: HaloDir) -> Option<usize> {
        let c = self.coords(rank);
        let (dh, dw) = dir.delta();
        let h = c.h as isize + dh;
        let w = c.w as isize + dw;
        if h < 0 || w < 0 || h >= self.h_parts as isize || w >= self.w_parts as isize {
            return None;
        }
        Some(self.rank(GridCoord { n: c.n, h: h as usize, w: w as usize }))
    }
}

impl std::fmt::Display for ProcGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.n_parts, self.h_parts, self.w_parts)
    }
}

/// One dimension split into `parts` contiguous blocks whose sizes differ by
/// at most one; the leftover elements go to the lowest-coordinate blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockedDim {
    extent: usize,
    parts: usize,
    cuts: Vec<usize>,
}

impl BlockedDim {
    pub fn new(extent: usize, parts: usize) -> Self {
        assert!(parts >= 1, "a dimension has at least one block");
        let base = extent / parts;
        let rem = extent % parts;
        let mut cuts = Vec::with_capacity(parts + 1);
        let mut at = 0;
        cuts.push(at);
        for i in 0..parts {
            at += base + usize::from(i < rem);
            cuts.push(at);
        }
        debug_assert_eq!(at, extent);
        BlockedDim { extent, parts, cuts }
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn block(&self, part: usize) -> Range<usize> {
        self.cuts[part]..self.cuts[part + 1]
    }

    /// The part owning a global index.
    pub fn part_containing(&self, idx: usize) -> usize {
        debug_assert!(idx < self.extent);
        // Last cut <= idx; empty blocks share cuts and are skipped naturally.
        self.cuts.partition_point(|&c| c <= idx) - 1
    }

    pub fn max_block_len(&self) -> usize {
        (0..self.parts).map(|i| self.block(i).len()).max().unwrap_or(0)
    }

    pub fn min_block_len(&self) -> usize {
        (0..self.parts).map(|i| self.block(i).len()).min().unwrap_or(0)
    }
}

/// A rectangular index set over (sample, row, column); channels implicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Box3 {
    pub n: Range<usize>,
    pub h: Range<usize>,
    pub w: Range<usize>,
}

impl Box3 {
    pub fn is_empty(&self) -> bool {
        self.n.is_empty() || self.h.is_empty() || self.w.is_empty()
    }

    /// Element count not counting channels.
    pub fn elements(&self) -> u64 {
        (self.n.len() * self.h.len() * self.w.len()) as u64
    }

    pub fn intersect(&self, other: &Box3) -> Box3 {
        fn meet(a: &Range<usize>, b: &Range<usize>) -> Range<usize> {
            let lo = a.start.max(b.start);
            let hi = a.end.min(b.end);
            lo..hi.max(lo)
        }
        Box3 {
            n: meet(&self.n, &other.n),
            h: meet(&self.h, &other.h),
            w: meet(&self.w, &other.w),
        }
    }

    pub fn contains(&self, n: usize, h: usize, w: usize) -> bool {
        self.n.contains(&n) && self.h.contains(&h) && self.w.contains(&w)
    }
}

// ---------------------------------------------------------------------------
// Layer distribution
// ---------------------------------------------------------------------------

/// How one layer's tensors are laid out: the same grid partitions the
/// layer's input and output tensors (their extents differ, so the block
/// boundaries do too). Channels and filters are replicated on every rank,
/// as are the layer's weights.
#[derive(Debug, Clone)]
pub struct LayerDistribution {
    pub grid: ProcGrid,
    in_shape: TensorShape,
    out_shape: TensorShape,
    n: BlockedDim,
    in_h: BlockedDim,
    in_w: BlockedDim,
    out_h: BlockedDim,
    out_w: BlockedDim,
}

impl LayerDistribution {
    pub fn new(grid: ProcGrid, in_shape: TensorShape, out_shape: TensorShape) -> Self {
        assert_eq!(in_shape.n, out_shape.n, "layers preserve the sample count");
        LayerDistribution {
            grid,
            in_shape,
            out_shape,
            n: BlockedDim::new(in_shape.n, grid.n_parts),
            in_h: BlockedDim::new(in_shape.h, grid.h_parts),
            in_w: BlockedDim::new(in_shape.w, grid.w_parts),
            out_h: BlockedDim::new(out_shape.h, grid.h_parts),
            out_w: BlockedDim::new(out_shape.w, grid.w_parts),
        }
    }

    pub fn ranks(&self) -> usize {
        self.grid.total()
    }

    pub fn in_shape(&self) -> TensorShape {
        self.in_shape
    }

    pub fn out_shape(&self) -> TensorShape {
        self.out_shape
    }

    fn check_rank(&self, rank: usize) -> Result<GridCoord, DistError> {
        if rank >= self.ranks() {
            return Err(DistError::RankOutOfRange { rank, total: self.ranks() });
        }
        Ok(self.grid.coords(rank))
    }

    /// Global input-tensor indices owned by `rank` (channels implicit).
    pub fn owned_in(&self, rank: usize) -> Result<Box3, DistError> {
        let c = self.check_rank(rank)?;
        Ok(Box3 {
            n: self.n.block(c.n),
            h: self.in_h.block(c.h),
            w: self.in_w.block(c.w),
        })
    }

    /// Global output-tensor indices owned by `rank`.
    pub fn owned_out(&self, rank: usize) -> Result<Box3, DistError> {
        let c = self.check_rank(rank)?;
        Ok(Box3 {
            n: self.n.block(c.n),
            h: self.out_h.block(c.h),
            w: self.out_w.block(c.w),
        })
    }

    /// Ownership map of the layer's input tensor.
    pub fn in_ownership(&self) -> Ownership {
        Ownership {
            grid: self.grid,
            channels: self.in_shape.c,
            n: self.n.clone(),
            h: self.in_h.clone(),
            w: self.in_w.clone(),
        }
    }

    /// Ownership map of the layer's output tensor.
    pub fn out_ownership(&self) -> Ownership {
        Ownership {
            grid: self.grid,
            channels: self.out_shape.c,
            n: self.n.clone(),
            h: self.out_h.clone(),
            w: self.out_w.clone(),
        }
    }

    /// Smallest spatial block extents over all ranks, (rows, columns) of the
    /// input tensor. Used to validate that a partition is thick enough for a
    /// window's halo.
    pub fn min_in_blocks(&self) -> (usize, usize) {
        (self.in_h.min_block_len(), self.in_w.min_block_len())
    }
}

/// One tensor's ownership map: which rank holds which (sample, row, column)
/// block. Channels ride along unpartitioned.
#[derive(Debug, Clone)]
pub struct Ownership {
    pub grid: ProcGrid,
    pub channels: usize,
    pub n: BlockedDim,
    pub h: BlockedDim,
    pub w: BlockedDim,
}

impl Ownership {
    pub fn shape(&self) -> TensorShape {
        TensorShape::new(self.n.extent(), self.channels, self.h.extent(), self.w.extent())
    }

    pub fn rank_box(&self, rank: usize) -> Box3 {
        let c = self.grid.coords(rank);
        Box3 {
            n: self.n.block(c.n),
            h: self.h.block(c.h),
            w: self.w.block(c.w),
        }
    }

    /// The rank owning a global (sample, row, column) index.
    pub fn owner(&self, n: usize, h: usize, w: usize) -> usize {
        self.grid.rank(GridCoord {
            n: self.n.part_containing(n),
            h: self.h.part_containing(h),
            w: self.w.part_containing(w),
        })
    }
}

// ---------------------------------------------------------------------------
// Halo exchange
// ---------------------------------------------------------------------------

/// The eight grid directions a halo message can travel. North is towards
/// lower row indices, west towards lower column indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaloDir {
    North,
    South,
    West,
    East,
    NorthWest,
    NorthEast,
    SouthWest,
    SouthEast,
}

impl HaloDir {
    pub const ALL: [HaloDir; 8] = [
        HaloDir::North,
        HaloDir::South,
        HaloDir::West,
        HaloDir::East,
        HaloDir::NorthWest,
        HaloDir::NorthEast,
        HaloDir::SouthWest,
        HaloDir::SouthEast,
    ];

    pub fn index(self) -> usize {
        match self {
            HaloDir::North => 0,
            HaloDir::South => 1,
            HaloDir::West => 2,
            HaloDir::East => 3,
            HaloDir::NorthWest => 4,
            HaloDir::NorthEast => 5,
            HaloDir::SouthWest => 6,
            HaloDir::SouthEast => 7,
        }
    }

    pub fn opposite(self) -> HaloDir {
        match self {
            HaloDir::North => HaloDir::South,
            HaloDir::South => HaloDir::North,
            HaloDir::West => HaloDir::East,
            HaloDir::East => HaloDir::West,
            HaloDir::NorthWest => HaloDir::SouthEast,
            HaloDir::NorthEast => HaloDir::SouthWest,
            HaloDir::SouthWest => HaloDir::NorthEast,
            HaloDir::SouthEast => HaloDir::NorthWest,
        }
    }

    /// (row step, column step) towards the neighbour.
    pub fn delta(self) -> (isize, isize) {
        match self {
            HaloDir::North => (-1, 0),
            HaloDir::South => (1, 0),
            HaloDir::West => (0, -1),
            HaloDir::East => (0, 1),
            HaloDir::NorthWest => (-1, -1),
            HaloDir::NorthEast => (-1, 1),
            HaloDir::SouthWest => (1, -1),
            HaloDir::SouthEast => (1, 1),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            HaloDir::North => "north",
            HaloDir::South => "south",
            HaloDir::West => "west",
            HaloDir::East => "east",
            HaloDir::NorthWest => "north-west",
            HaloDir::NorthEast => "north-east",
            HaloDir::SouthWest => "south-west",
            HaloDir::SouthEast => "south-east",
        }
    }
}

/// One direction's worth of halo traffic for one rank: the peer and the
/// global index rectangle exchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct HaloRegion {
    pub peer: usize,
    pub span: Box3,
}

/// Halo view of a single rank: what to receive and send per direction, plus
/// the bounding extents of the rank's working tile (own block plus halo).
#[derive(Debug, Clone)]
pub struct RankHalo {
    pub recvs: [Option<HaloRegion>; 8],
    pub sends: [Option<HaloRegion>; 8],
    pub tile_h: Range<usize>,
    pub tile_w: Range<usize>,
}

impl RankHalo {
    fn empty(own_h: Range<usize>, own_w: Range<usize>) -> Self {
        RankHalo {
            recvs: Default::default(),
            sends: Default::default(),
            tile_h: own_h,
            tile_w: own_w,
        }
    }

    /// Elements received across all directions, channels included.
    pub fn recv_elements(&self, channels: usize) -> u64 {
        self.recvs
            .iter()
            .flatten()
            .map(|r| r.span.elements() * channels as u64)
            .sum()
    }
}

/// Halo plan for every rank of a layer, over one exchanged tensor.
#[derive(Debug, Clone)]
pub struct LayerHalo {
    pub ranks: Vec<RankHalo>,
}

impl LayerHalo {
    /// True when no rank exchanges anything.
    pub fn is_empty(&self) -> bool {
        self.ranks.iter().all(|r| r.recvs.iter().all(Option::is_none))
    }

    /// Total received elements over all ranks and directions, channels
    /// included. Each message is counted once, on the receiving side.
    pub fn total_recv_elements(&self, channels: usize) -> u64 {
        self.ranks.iter().map(|r| r.recv_elements(channels)).sum()
    }
}

/// Inclusive interval, or nothing.
type Span = Option<(usize, usize)>;

fn clip(lo: isize, hi: isize, extent: usize) -> Span {
    let lo = lo.max(0);
    let hi = hi.min(extent as isize - 1);
    if lo > hi {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

fn hull(a: Span, b: Span) -> Span {
    match (a, b) {
        (Some((alo, ahi)), Some((blo, bhi))) => Some((alo.min(blo), ahi.max(bhi))),
        (s, None) | (None, s) => s,
    }
}

/// Core halo construction over one exchanged tensor. `required` yields, per
/// rank, the inclusive row and column intervals the rank must read (already
/// clipped to the tensor bounds); everything outside the rank's own block
/// becomes a receive from the owning neighbour. Sends are the mirror image
/// of the neighbours' receives, so the send/receive duality holds by
/// construction.
fn build_halo<F>(
    grid: ProcGrid,
    n_dim: &BlockedDim,
    h_dim: &BlockedDim,
    w_dim: &BlockedDim,
    window: usize,
    required: F,
) -> Result<LayerHalo, DistError>
where
    F: Fn(usize) -> Option<((usize, usize), (usize, usize))>,
{
    let total = grid.total();
    let mut ranks = Vec::with_capacity(total);

    for rank in 0..total {
        let c = grid.coords(rank);
        let own_n = n_dim.block(c.n);
        let own_h = h_dim.block(c.h);
        let own_w = w_dim.block(c.w);

        let req = required(rank);
        let mut halo = RankHalo::empty(own_h.clone(), own_w.clone());
        let ((rh0, rh1), (rw0, rw1)) = match req {
            Some(r) => r,
            None => {
                ranks.push(halo);
                continue;
            }
        };

        halo.tile_h = own_h.start.min(rh0)..own_h.end.max(rh1 + 1);
        halo.tile_w = own_w.start.min(rw0)..own_w.end.max(rw1 + 1);

        // Extra rows/columns needed on each side of the own block.
        let north = if rh0 < own_h.start { Some((rh0, own_h.start - 1)) } else { None };
        let south = if rh1 + 1 > own_h.end { Some((own_h.end.max(rh0), rh1)) } else { None };
        let west = if rw0 < own_w.start { Some((rw0, own_w.start - 1)) } else { None };
        let east = if rw1 + 1 > own_w.end { Some((own_w.end.max(rw0), rw1)) } else { None };
        // Rows/columns of the requirement that fall inside the own block.
        let mid_h = {
            let lo = rh0.max(own_h.start);
            let hi = rh1.min(own_h.end.saturating_sub(1));
            if own_h.is_empty() || lo > hi { None } else { Some((lo, hi)) }
        };
        let mid_w = {
            let lo = rw0.max(own_w.start);
            let hi = rw1.min(own_w.end.saturating_sub(1));
            if own_w.is_empty() || lo > hi { None } else { Some((lo, hi)) }
        };

        let side = |dir: HaloDir, rows: Span, cols: Span| -> Result<Option<HaloRegion>, DistError> {
            let (rows, cols) = match (rows, cols) {
                (Some(r), Some(c)) => (r, c),
                _ => return Ok(None),
            };
            let peer = match grid.neighbour(rank, dir) {
                Some(p) => p,
                None => {
                    // Requirements are clipped to the tensor, so a missing
                    // neighbour can only mean the partition is too thin.
                    let (axis, lo, hi) = if matches!(dir, HaloDir::North | HaloDir::South) {
                        ('h', rows.0, rows.1)
                    } else {
                        ('w', cols.0, cols.1)
                    };
                    return Err(DistError::HaloBeyondNeighbour { rank, axis, lo, hi, window });
                }
            };
            // The neighbour must own the whole rectangle.
            let pc = grid.coords(peer);
            let ph = h_dim.block(pc.h);
            let pw = w_dim.block(pc.w);
            if rows.0 < ph.start || rows.1 >= ph.end {
                return Err(DistError::HaloBeyondNeighbour {
                    rank,
                    axis: 'h',
                    lo: rows.0,
                    hi: rows.1,
                    window,
                });
            }
            if cols.0 < pw.start || cols.1 >= pw.end {
                return Err(DistError::HaloBeyondNeighbour {
                    rank,
                    axis: 'w',
                    lo: cols.0,
                    hi: cols.1,
                    window,
                });
            }
            Ok(Some(HaloRegion {
                peer,
                span: Box3 {
                    n: own_n.clone(),
                    h: rows.0..rows.1 + 1,
                    w: cols.0..cols.1 + 1,
                },
            }))
        };

        // The halo of a rectangle decomposes into four edges and four
        // corners; checking each side against the neighbour's block also
        // guarantees halos never skip over a rank.
        halo.recvs[HaloDir::North.index()] = side(HaloDir::North, north, mid_w)?;
        halo.recvs[HaloDir::South.index()] = side(HaloDir::South, south, mid_w)?;
        halo.recvs[HaloDir::West.index()] = side(HaloDir::West, mid_h, west)?;
        halo.recvs[HaloDir::East.index()] = side(HaloDir::East, mid_h, east)?;
        halo.recvs[HaloDir::NorthWest.index()] = side(HaloDir::NorthWest, north, west)?;
        halo.recvs[HaloDir::NorthEast.index()] = side(HaloDir::NorthEast, north, east)?;
        halo.recvs[HaloDir::SouthWest.index()] = side(HaloDir::SouthWest, south, west)?;
        halo.recvs[HaloDir::SouthEast.index()] = side(HaloDir::SouthEast, south, east)?;

        ranks.push(halo);
    }

    // Sends mirror the neighbours' receives.
    for rank in 0..total {
        for dir in HaloDir::ALL {
            let send = grid.neighbour(rank, dir).and_then(|peer| {
                ranks[peer].recvs[dir.opposite().index()]
                    .as_ref()
                    .filter(|r| r.peer == rank)
                    .map(|r| HaloRegion { peer, span: r.span.clone() })
            });
            ranks[rank].sends[dir.index()] = send;
        }
    }

    Ok(LayerHalo { ranks })
}

/// Forward halo of a windowed layer: the input rectangles each rank must
/// receive so it can evaluate every window of its owned output block. Ranks
/// at the tensor edge read zero padding instead, so their halo shrinks; a
/// window of size one needs no halo at all.
pub fn halo_spec(d: &LayerDistribution, win: Window) -> Result<LayerHalo, DistError> {
    let in_shape = d.in_shape;
    build_halo(d.grid, &d.n, &d.in_h, &d.in_w, win.size, |rank| {
        let out = d.owned_out(rank).expect("rank enumerated from the grid");
        if out.h.is_empty() || out.w.is_empty() {
            return None;
        }
        let (hlo, hhi) = win.input_span(out.h.start, out.h.end - 1);
        let (wlo, whi) = win.input_span(out.w.start, out.w.end - 1);
        match (clip(hlo, hhi, in_shape.h), clip(wlo, whi, in_shape.w)) {
            (Some(h), Some(w)) => Some((h, w)),
            _ => None,
        }
    })
}

/// Backward halo of a windowed layer: the output-gradient rectangles each
/// rank must receive so it can accumulate the error of every input element
/// it owns. The exchanged tensor here is the layer output.
pub fn gradient_halo_spec(d: &LayerDistribution, win: Window) -> Result<LayerHalo, DistError> {
    let out_shape = d.out_shape;
    build_halo(d.grid, &d.n, &d.out_h, &d.out_w, win.size, |rank| {
        let own = d.owned_in(rank).expect("rank enumerated from the grid");
        if own.h.is_empty() || own.w.is_empty() {
            return None;
        }
        let (hlo, hhi) = win.output_span(own.h.start, own.h.end - 1);
        let (wlo, whi) = win.output_span(own.w.start, own.w.end - 1);
        match (clip(hlo, hhi, out_shape.h), clip(wlo, whi, out_shape.w)) {
            (Some(h), Some(w)) => Some((h, w)),
            _ => None,
        }
    })
}

/// Forward halo for pooling layers. Max-pool backpropagation re-derives each
/// window's argmax, including windows owned by a neighbour that cover this
/// rank's input elements, so the forward input tile is widened to the hull
/// of the forward requirement and those neighbouring windows.
pub fn pool_halo_spec(d: &LayerDistribution, win: Window) -> Result<LayerHalo, DistError> {
    let in_shape = d.in_shape;
    let out_shape = d.out_shape;
    build_halo(d.grid, &d.n, &d.in_h, &d.in_w, win.size, |rank| {
        let out = d.owned_out(rank).expect("rank enumerated from the grid");
        let own = d.owned_in(rank).expect("rank enumerated from the grid");

        let fwd_h = if out.h.is_empty() || out.w.is_empty() {
            None
        } else {
            let (lo, hi) = win.input_span(out.h.start, out.h.end - 1);
            clip(lo, hi, in_shape.h)
        };
        let fwd_w = if out.h.is_empty() || out.w.is_empty() {
            None
        } else {
            let (lo, hi) = win.input_span(out.w.start, out.w.end - 1);
            clip(lo, hi, in_shape.w)
        };

        // Windows covering the owned input block, then their input spans.
        let cover = |own: &Range<usize>, out_extent: usize, in_extent: usize| -> Span {
            if own.is_empty() {
                return None;
            }
            let (olo, ohi) = win.output_span(own.start, own.end - 1);
            let (olo, ohi) = clip(olo, ohi, out_extent)?;
            let (ilo, ihi) = win.input_span(olo, ohi);
            clip(ilo, ihi, in_extent)
        };
        let bwd_h = cover(&own.h, out_shape.h, in_shape.h);
        let bwd_w = cover(&own.w, out_shape.w, in_shape.w);

        match (hull(fwd_h, bwd_h), hull(fwd_w, bwd_w)) {
            (Some(h), Some(w)) => Some((h, w)),
            _ => None,
        }
    })
}

// ---------------------------------------------------------------------------
// Shuffle plans
// ---------------------------------------------------------------------------

/// One rectangle moving from `src` to `dst` during a redistribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    pub src: usize,
    pub dst: usize,
    pub span: Box3,
}

/// Exact exchange list for redistributing one tensor between two
/// distributions over the same rank count.
#[derive(Debug, Clone)]
pub struct ShufflePlan {
    pub channels: usize,
    /// Cross-rank moves, ordered by (src, dst); src == dst never appears.
    pub transfers: Vec<Transfer>,
    /// Overlaps that stay in place, one per rank at most.
    pub kept: Vec<(usize, Box3)>,
}

impl ShufflePlan {
    pub fn is_empty(&self) -> bool {
        self.transfers.is_empty()
    }

    /// Total elements crossing ranks, channels included.
    pub fn moved_elements(&self) -> u64 {
        self.transfers
            .iter()
            .map(|t| t.span.elements() * self.channels as u64)
            .sum()
    }

    /// Per-rank outgoing volumes: for each rank, the (dst, elements) pairs.
    pub fn sends_by_rank(&self, ranks: usize) -> Vec<Vec<(usize, u64)>> {
        let mut out = vec![Vec::new(); ranks];
        for t in &self.transfers {
            out[t.src].push((t.dst, t.span.elements() * self.channels as u64));
        }
        out
    }
}

/// Computes the redistribution between two ownership maps of the same
/// tensor. Every element is owned by exactly one rank on each side, so the
/// plan is the pairwise intersection of the two block grids.
pub fn shuffle_plan(from: &Ownership, to: &Ownership) -> Result<ShufflePlan, DistError> {
    if from.shape() != to.shape() {
        return Err(DistError::ShuffleShapeMismatch {
            from_shape: from.shape(),
            to_shape: to.shape(),
        });
    }
    if from.grid.total() != to.grid.total() {
        return Err(DistError::ShuffleRankMismatch {
            from: from.grid.total(),
            to: to.grid.total(),
        });
    }

    let ranks = from.grid.total();
    let mut transfers = Vec::new();
    let mut kept = Vec::new();
    for src in 0..ranks {
        let a = from.rank_box(src);
        if a.is_empty() {
            continue;
        }
        for dst in 0..ranks {
            let b = to.rank_box(dst);
            let both = a.intersect(&b);
            if both.is_empty() {
                continue;
            }
            if src == dst {
                kept.push((src, both));
            } else {
                transfers.push(Transfer { src, dst, span: both });
            }
        }
    }
    Ok(ShufflePlan { channels: from.channels, transfers, kept })
}

// ---------------------------------------------------------------------------
