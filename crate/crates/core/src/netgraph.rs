//! Layer-graph representation of a convolutional network.
//!
//! Networks are described in a small JSON dialect (see [`parse_network`]):
//! a flat list of layers, each naming its parents. Parsing validates the
//! structural rules (unique ids, acyclicity, parent shape agreement, odd
//! kernels, padding bounded by the kernel radius) and resolves every layer's
//! input and output tensor shape. Layers are stored in topological order;
//! ties are broken by declaration order so downstream passes are
//! deterministic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// Logical extent of a 4-d activation tensor in NCHW order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl TensorShape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        TensorShape { n, c, h, w }
    }

    /// Total element count.
    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Convolution hyper-parameters. Kernels are square and odd so the halo
/// radius `kernel / 2` is well defined on both sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    /// Halo radius: how far a window reaches past its centre element.
    pub fn radius(&self) -> usize {
        self.kernel / 2
    }

    pub fn window(&self) -> Window {
        Window {
            size: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Pooling flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Average,
}

/// Pooling hyper-parameters. Windows may be even (2x2 is the common case).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolParams {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
    pub kind: PoolKind,
}

impl PoolParams {
    pub fn window_spec(&self) -> Window {
        Window {
            size: self.window,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// A sliding window over the spatial dimensions: the common shape of
/// convolution and pooling as far as index arithmetic is concerned.
/// Output position `i` reads input rows `stride*i - padding ..
/// stride*i - padding + size - 1` (and the same for columns); reads outside
/// the tensor are zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    /// Output extent produced from `extent` input positions.
    pub fn out_extent(&self, extent: usize) -> usize {
        let reach = extent + 2 * self.padding;
        if reach < self.size {
            return 0;
        }
        // ceil((extent + 2p - k + 1) / s)
        (reach - self.size + 1 + self.stride - 1) / self.stride
    }

    /// Inclusive input interval read by the inclusive output interval
    /// `[first, last]`, before clipping to the tensor bounds.
    pub fn input_span(&self, first: usize, last: usize) -> (isize, isize) {
        let lo = self.stride as isize * first as isize - self.padding as isize;
        let hi = self.stride as isize * last as isize - self.padding as isize
            + self.size as isize
            - 1;
        (lo, hi)
    }

    /// Inclusive output interval whose windows touch the inclusive input
    /// interval `[first, last]`, before clipping to the output bounds.
    pub fn output_span(&self, first: usize, last: usize) -> (isize, isize) {
        // Output i touches input first.. iff  s*i - p + size - 1 >= first
        // and s*i - p <= last.
        let s = self.stride as isize;
        let p = self.padding as isize;
        let lo = first as isize + p - self.size as isize + 1;
        let lo = if lo <= 0 { 0 } else { (lo + s - 1) / s };
        let hi = (last as isize + p).div_euclid(s);
        (lo, hi)
    }
}

/// What a layer computes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    /// Declares the batch entering the network; carries the data shape.
    Input(TensorShape),
    Conv(ConvParams),
    Pool(PoolParams),
    Relu,
    /// Batch norm with statistics taken over each rank's local shard.
    BatchNormLocal,
    /// Batch norm with per-sample statistics over the full spatial extent,
    /// aggregated across ranks that share a sample.
    BatchNormSpatial,
    /// Fully connected head. Planned and priced, but not executed by the
    /// virtual-rank simulator.
    FullyConnected { features: usize },
    /// Passthrough marker for the network output.
    Output,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input(_) => "input",
            LayerKind::Conv(_) => "conv",
            LayerKind::Pool(_) => "pool",
            LayerKind::Relu => "relu",
            LayerKind::BatchNormLocal => "batchnorm-local",
            LayerKind::BatchNormSpatial => "batchnorm-spatial",
            LayerKind::FullyConnected { .. } => "fc",
            LayerKind::Output => "output",
        }
    }

    /// The sliding window for layers that have one (conv and pool).
    pub fn window(&self) -> Option<Window> {
        match self {
            LayerKind::Conv(p) => Some(p.window()),
            LayerKind::Pool(p) => Some(p.window_spec()),
            _ => None,
        }
    }
}

/// One layer as declared: id, kind, and parent ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub parents: Vec<String>,
}

/// Input and output shape resolved for a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShapes {
    pub input: TensorShape,
    pub output: TensorShape,
}

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("network document is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("network has no layers")]
    Empty,
    #[error("duplicate layer id `{0}`")]
    DuplicateId(String),
    #[error("layer `{layer}` references unknown parent `{parent}`")]
    UnknownParent { layer: String, parent: String },
    #[error("layer `{0}` has kind `{1}` which is not recognised")]
    UnknownKind(String, String),
    #[error("layer `{0}`: input layers must not declare parents")]
    InputWithParents(String),
    #[error("layer `{0}`: non-input layers must declare at least one parent")]
    MissingParents(String),
    #[error("layer `{0}`: missing required field `{1}`")]
    MissingField(String, &'static str),
    #[error("layer `{0}`: {1}")]
    BadParams(String, String),
    #[error("network contains a cycle through layer `{0}`")]
    Cycle(String),
    #[error(
        "layer `{layer}`: parent shapes disagree ({first} vs {second}); \
         joined parents must produce identical tensors"
    )]
    ParentShapeMismatch {
        layer: String,
        first: TensorShape,
        second: TensorShape,
    },
    #[error(
        "layer `{layer}`: window of size {window} does not fit the padded \
         input extent {extent}"
    )]
    WindowTooLarge {
        layer: String,
        window: usize,
        extent: usize,
    },
}

/// A validated, topologically ordered layer graph with resolved shapes.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    layers: Vec<LayerSpec>,
    index: BTreeMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    shapes: Vec<LayerShapes>,
}

impl NetworkGraph {
    /// Validates a declared layer list and resolves shapes. Layers may be
    /// declared in any order; the result is stored topologically with
    /// declaration order breaking ties.
    pub fn from_layers(declared: Vec<LayerSpec>) -> Result<Self, NetError> {
        if declared.is_empty() {
            return Err(NetError::Empty);
        }

        let mut decl_index = BTreeMap::new();
        for (i, l) in declared.iter().enumerate() {
            if decl_index.insert(l.id.clone(), i).is_some() {
                return Err(NetError::DuplicateId(l.id.clone()));
            }
        }

        // Structural checks on the declared list.
        let mut decl_parents: Vec<Vec<usize>> = Vec::with_capacity(declared.len());
        for l in &declared {
            match l.kind {
                LayerKind::Input(_) => {
                    if !l.parents.is_empty() {
                        return Err(NetError::InputWithParents(l.id.clone()));
                    }
                }
                _ => {
                    if l.parents.is_empty() {
                        return Err(NetError::MissingParents(l.id.clone()));
                    }
                }
            }
            let mut ps = Vec::with_capacity(l.parents.len());
            for p in &l.parents {
                match decl_index.get(p) {
                    Some(&i) => ps.push(i),
                    None => {
                        return Err(NetError::UnknownParent {
                            layer: l.id.clone(),
                            parent: p.clone(),
                        })
                    }
                }
            }
            decl_parents.push(ps);
        }

        // Kahn's algorithm; the ready set is scanned in declaration order so
        // the final ordering is stable for a given document.
        let n = declared.len();
        let mut indegree: Vec<usize> = decl_parents.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut decl_children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, ps) in decl_parents.iter().enumerate() {
            for &p in ps {
                decl_children[p].push(i);
            }
        }
        let mut order = Vec::with_capacity(n);
        while let Some(&next) = ready.iter().next() {
            ready.remove(&next);
            order.push(next);
            for &c in &decl_children[next] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n)
                .find(|&i| indegree[i] > 0)
                .expect("cycle implies a layer with unresolved parents");
            return Err(NetError::Cycle(declared[stuck].id.clone()));
        }

        // Re-index into topological order.
        let mut topo_pos = vec![0usize; n];
        for (pos, &decl) in order.iter().enumerate() {
            topo_pos[decl] = pos;
        }
        let layers: Vec<LayerSpec> = order.iter().map(|&i| declared[i].clone()).collect();
        let parents: Vec<Vec<usize>> = order
            .iter()
            .map(|&i| decl_parents[i].iter().map(|&p| topo_pos[p]).collect())
            .collect();
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, ps) in parents.iter().enumerate() {
            for &p in ps {
                children[p].push(i);
            }
        }
        let index: BTreeMap<String, usize> = layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.clone(), i))
            .collect();

        // Shape resolution in topological order.
        let mut shapes: Vec<LayerShapes> = Vec::with_capacity(n);
        for (i, l) in layers.iter().enumerate() {
            let input = match l.kind {
                LayerKind::Input(shape) => {
                    validate_input_shape(&l.id, shape)?;
                    shape
                }
                _ => {
                    let first = shapes[parents[i][0]].output;
                    for &p in &parents[i][1..] {
                        let other = shapes[p].output;
                        if other != first {
                            return Err(NetError::ParentShapeMismatch {
                                layer: l.id.clone(),
                                first,
                                second: other,
                            });
                        }
                    }
                    first
                }
            };
            let output = resolve_output_shape(l, input)?;
            shapes.push(LayerShapes { input, output });
        }

        Ok(NetworkGraph {
            layers,
            index,
            parents,
            children,
            shapes,
        })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Layers in topological order.
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> &LayerSpec {
        &self.layers[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn shapes(&self, idx: usize) -> LayerShapes {
        self.shapes[idx]
    }

    pub fn parents(&self, idx: usize) -> &[usize] {
        &self.parents[idx]
    }

    pub fn children(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    pub fn sources(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.parents[i].is_empty()).collect()
    }

    pub fn sinks(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.children[i].is_empty()).collect()
    }

    /// True when the network is a single unbranched chain.
    pub fn is_line(&self) -> bool {
        self.sources().len() == 1
            && self
                .layers
                .iter()
                .enumerate()
                .all(|(i, _)| self.parents[i].len() <= 1 && self.children[i].len() <= 1)
    }

    /// Splits the graph into source-to-sink paths that together cover every
    /// layer. The first path maximises the summed `weights` of its layers;
    /// each later path maximises the weight of layers not yet covered
    /// (covered layers contribute zero), so it reuses as little of the
    /// earlier paths as possible. Ties prefer the path covering more new
    /// layers, then declaration order, making the result deterministic.
    ///
    /// `weights` must be finite and non-negative, one entry per layer.
    pub fn longest_path_decomposition(&self, weights: &[f64]) -> Vec<Vec<usize>> {
        assert_eq!(weights.len(), self.len(), "one weight per layer");
        assert!(
            weights.iter().all(|w| w.is_finite() && *w >= 0.0),
            "path weights must be finite and non-negative"
        );

        let n = self.len();
        let mut covered = vec![false; n];
        let mut paths = Vec::new();
        while covered.iter().any(|c| !c) {
            // Longest path under (weight, newly-covered count, length),
            // lexicographic; the length criterion keeps paths maximal even
            // when already-covered layers contribute no weight. Ties beyond
            // that keep the first candidate in declaration order.
            let mut best: Vec<(f64, usize, usize, Option<usize>)> = Vec::with_capacity(n);
            for i in 0..n {
                let w = if covered[i] { 0.0 } else { weights[i] };
                let cnt = usize::from(!covered[i]);
                let mut entry = (w, cnt, 1, None);
                for &p in &self.parents[i] {
                    let cand = (best[p].0 + w, best[p].1 + cnt, best[p].2 + 1, Some(p));
                    if (cand.0, cand.1, cand.2) > (entry.0, entry.1, entry.2) {
                        entry = cand;
                    }
                }
                best.push(entry);
            }
            let mut sink = None;
            for &s in &self.sinks() {
                match sink {
                    None => sink = Some(s),
                    Some(cur) => {
                        let (bw, bc, bl, _) = best[cur];
                        let (sw, sc, sl, _) = best[s];
                        if (sw, sc, sl) > (bw, bc, bl) {
                            sink = Some(s);
                        }
                    }
                }
            }
            let mut path = Vec::new();
            let mut at = sink.expect("a DAG with layers has a sink");
            loop {
                path.push(at);
                match best[at].3 {
                    Some(p) => at = p,
                    None => break,
                }
            }
            path.reverse();
            let before = covered.iter().filter(|&&c| c).count();
            for &i in &path {
                covered[i] = true;
            }
            let after = covered.iter().filter(|&&c| c).count();
            assert!(after > before, "every iteration must cover a new layer");
            paths.push(path);
        }
        paths
    }
}

fn validate_input_shape(id: &str, s: TensorShape) -> Result<(), NetError> {
    if s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0 {
        return Err(NetError::BadParams(
            id.to_string(),
            format!("input shape {s} has a zero extent"),
        ));
    }
    Ok(())
}

fn resolve_output_shape(l: &LayerSpec, input: TensorShape) -> Result<TensorShape, NetError> {
    match &l.kind {
        LayerKind::Input(s) => Ok(*s),
        LayerKind::Conv(p) => {
            if p.filters == 0 {
                return Err(NetError::BadParams(
                    l.id.clone(),
                    "conv needs at least one filter".into(),
                ));
            }
            if p.kernel == 0 || p.kernel % 2 == 0 {
                return Err(NetError::BadParams(
                    l.id.clone(),
                    format!("kernel must be odd and positive, got {}", p.kernel),
                ));
            }
            if p.stride == 0 {
                return Err(NetError::BadParams(l.id.clone(), "stride must be positive".into()));
            }
            if p.padding > p.radius() {
                return Err(NetError::BadParams(
                    l.id.clone(),
                    format!(
                        "padding {} exceeds the kernel radius {}",
                        p.padding,
                        p.radius()
                    ),
                ));
            }
            let w = p.window();
            let oh = checked_out_extent(l, &w, input.h)?;
            let ow = checked_out_extent(l, &w, input.w)?;
            Ok(TensorShape::new(input.n, p.filters, oh, ow))
        }
        LayerKind::Pool(p) => {
            if p.window == 0 {
                return Err(NetError::BadParams(l.id.clone(), "pool window must be positive".into()));
            }
            if p.stride == 0 {
                return Err(NetError::BadParams(l.id.clone(), "stride must be positive".into()));
            }
            if p.padding >= p.window {
                return Err(NetError::BadParams(
                    l.id.clone(),
                    format!("padding {} must be smaller than the window {}", p.padding, p.window),
                ));
            }
            let w = p.window_spec();
            let oh = checked_out_extent(l, &w, input.h)?;
            let ow = checked_out_extent(l, &w, input.w)?;
            Ok(TensorShape::new(input.n, input.c, oh, ow))
        }
        LayerKind::Relu | LayerKind::BatchNormLocal | LayerKind::BatchNormSpatial => Ok(input),
        LayerKind::FullyConnected { features } => {
            if *features == 0 {
                return Err(NetError::BadParams(l.id.clone(), "fc needs at least one feature".into()));
            }
            Ok(TensorShape::new(input.n, *features, 1, 1))
        }
        LayerKind::Output => Ok(input),
    }
}

fn checked_out_extent(l: &LayerSpec, w: &Window, extent: usize) -> Result<usize, NetError> {
    let out = w.out_extent(extent);
    if out == 0 {
        return Err(NetError::WindowTooLarge {
            layer: l.id.clone(),
            window: w.size,
            extent: extent + 2 * w.padding,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Document form
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct NetworkDoc {
    layers: Vec<LayerDoc>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    id: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    parents: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    filters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pool: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<usize>,
}

fn require(doc: &LayerDoc, field: &'static str, v: Option<usize>) -> Result<usize, NetError> {
    v.ok_or(NetError::MissingField(doc.id.clone(), field))
}

fn layer_from_doc(doc: &LayerDoc) -> Result<LayerSpec, NetError> {
    let kind = match doc.kind.as_str() {
        "input" => LayerKind::Input(TensorShape::new(
            require(doc, "n", doc.n)?,
            require(doc, "c", doc.c)?,
            require(doc, "h", doc.h)?,
            require(doc, "w", doc.w)?,
        )),
        "conv" => LayerKind::Conv(ConvParams {
            filters: require(doc, "filters", doc.filters)?,
            kernel: require(doc, "kernel", doc.kernel)?,
            stride: doc.stride.unwrap_or(1),
            padding: doc.padding.unwrap_or(0),
        }),
        "pool" => LayerKind::Pool(PoolParams {
            window: require(doc, "window", doc.window)?,
            stride: doc.stride.unwrap_or(1),
            padding: doc.padding.unwrap_or(0),
            kind: match doc.pool.as_deref() {
                None | Some("max") => PoolKind::Max,
                Some("avg") | Some("average") => PoolKind::Average,
                Some(other) => {
                    return Err(NetError::BadParams(
                        doc.id.clone(),
                        format!("unknown pool flavour `{other}` (expected `max` or `avg`)"),
                    ))
                }
            },
        }),
        "relu" => LayerKind::Relu,
        "batchnorm-local" => LayerKind::BatchNormLocal,
        "batchnorm-spatial" => LayerKind::BatchNormSpatial,
        "fc" => LayerKind::FullyConnected {
            features: require(doc, "features", doc.features)?,
        },
        "output" => LayerKind::Output,
        other => return Err(NetError::UnknownKind(doc.id.clone(), other.to_string())),
    };
    Ok(LayerSpec {
        id: doc.id.clone(),
        kind,
        parents: doc.parents.clone(),
    })
}

fn doc_from_layer(l: &LayerSpec) -> LayerDoc {
    let mut doc = LayerDoc {
        id: l.id.clone(),
        kind: l.kind.name().to_string(),
        parents: l.parents.clone(),
        ..LayerDoc::default()
    };
    match &l.kind {
        LayerKind::Input(s) => {
            doc.n = Some(s.n);
            doc.c = Some(s.c);
            doc.h = Some(s.h);
            doc.w = Some(s.w);
        }
        LayerKind::Conv(p) => {
            doc.filters = Some(p.filters);
            doc.kernel = Some(p.kernel);
            doc.stride = Some(p.stride);
            doc.padding = Some(p.padding);
        }
        LayerKind::Pool(p) => {
            doc.window = Some(p.window);
            doc.stride = Some(p.stride);
            doc.padding = Some(p.padding);
            doc.pool = Some(
                match p.kind {
                    PoolKind::Max => "max",
                    PoolKind::Average => "avg",
                }
                .to_string(),
            );
        }
        LayerKind::FullyConnected { features } => doc.features = Some(*features),
        LayerKind::Relu
        | LayerKind::BatchNormLocal
        | LayerKind::BatchNormSpatial
        | LayerKind::Output => {}
    }
    doc
}

/// Parses the JSON network document into a validated graph.
pub fn parse_network(text: &str) -> Result<NetworkGraph, NetError> {
    let doc: NetworkDoc = serde_json::from_str(text)?;
    let layers = doc
        .layers
        .iter()
        .map(layer_from_doc)
        .collect::<Result<Vec<_>, _>>()?;
    NetworkGraph::from_layers(layers)
}

/// Renders a graph back to the canonical document form: topological layer
/// order, explicit defaults, two-space indentation.
pub fn serialize_network(g: &NetworkGraph) -> String {
    let doc = NetworkDoc {
        layers: g.layers().iter().map(doc_from_layer).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("network documents always serialise")
}

// ---------------------------------------------------------------------------
