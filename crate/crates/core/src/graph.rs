//! Object-, image- and hierarchical-level scene graphs and their
//! symmetric renormalized adjacency.

use std::fmt::Write as _;

use crate::corpus::{Region, SceneRecord};
use crate::error::{Error, Result};
use crate::geometry::spatial_feature;
use crate::gmm::GmmModel;
use crate::relation::RelationClassifier;
use crate::tensor::Tensor;

/// Width of the one-hot node-type block appended to node features.
pub const TYPE_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeLevel {
    Object,
    Image,
    Scene,
}

impl NodeLevel {
    fn one_hot(self) -> [f64; TYPE_DIM] {
        match self {
            NodeLevel::Object => [1.0, 0.0, 0.0],
            NodeLevel::Image => [0.0, 1.0, 0.0],
            NodeLevel::Scene => [0.0, 0.0, 1.0],
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            NodeLevel::Object => "object",
            NodeLevel::Image => "image",
            NodeLevel::Scene => "scene",
        }
    }
}

/// Which graph-building branch produced a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GraphLevel {
    Object,
    Image,
    Hierarchical,
}

impl GraphLevel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "object" => Ok(Self::Object),
            "image" => Ok(Self::Image),
            "hierarchical" => Ok(Self::Hierarchical),
            other => Err(Error::validation(format!(
                "unknown graph level {other:?} (object|image|hierarchical)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Object => "object",
            Self::Image => "image",
            Self::Hierarchical => "hierarchical",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HierarchyMode {
    /// Objects complete within an image, image linked to its objects,
    /// images complete within the context.
    #[default]
    Structured,
    /// One complete graph over every image and object node.
    Literal,
}

impl HierarchyMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "structured" => Ok(Self::Structured),
            "literal" => Ok(Self::Literal),
            other => Err(Error::validation(format!("unknown hierarchy mode {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Structured => "structured",
            Self::Literal => "literal",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GraphOptions {
    pub mode: HierarchyMode,
    /// Adds one node per superclass, linked to that superclass's images.
    pub scene_nodes: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub level: NodeLevel,
    pub feature: Vec<f64>,
}

/// Complementary features of an ordered object pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeAnnotation {
    /// Mixture responsibilities of the pair's spatial feature.
    pub spatial_scores: Vec<f64>,
    pub relation: usize,
    pub relation_distribution: Vec<f64>,
}

/// Undirected edge `i < j` with the annotations of `(i, j)` and `(j, i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    pub forward: Option<EdgeAnnotation>,
    pub backward: Option<EdgeAnnotation>,
}

/// Node bookkeeping for one image of the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageNodes {
    pub image_id: String,
    pub image_node: Option<usize>,
    /// Object nodes in detection order.
    pub objects: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    pub level: GraphLevel,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub images: Vec<ImageNodes>,
    typed: bool,
}

/// Produces the annotation of the ordered region pair `(i, j)`.
pub trait EdgeAnnotator {
    fn annotate(&self, regions: &[Region], i: usize, j: usize) -> Result<EdgeAnnotation>;
}

impl<F> EdgeAnnotator for F
where
    F: Fn(&[Region], usize, usize) -> Result<EdgeAnnotation>,
{
    fn annotate(&self, regions: &[Region], i: usize, j: usize) -> Result<EdgeAnnotation> {
        self(regions, i, j)
    }
}

/// Annotates pairs with mixture scores and classifier predictions.
pub struct PairAnnotator<'a> {
    pub gmm: &'a GmmModel,
    pub classifier: &'a RelationClassifier,
}

impl EdgeAnnotator for PairAnnotator<'_> {
    fn annotate(&self, regions: &[Region], i: usize, j: usize) -> Result<EdgeAnnotation> {
        let sf = spatial_feature(&regions[i].bbox, &regions[j].bbox)?;
        let pred = self.classifier.classify_pair(regions, i, j)?;
        Ok(EdgeAnnotation {
            spatial_scores: self.gmm.assign_scores(&sf),
            relation: pred.class_id,
            relation_distribution: pred.distribution,
        })
    }
}

fn mean_feature(regions: &[Region]) -> Vec<f64> {
    let mut out = vec![0.0; regions[0].feature.len()];
    for r in regions {
        for (o, v) in out.iter_mut().zip(&r.feature) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= regions.len() as f64);
    out
}

impl SceneGraph {
    fn empty(level: GraphLevel) -> Self {
        Self {
            level,
            nodes: Vec::new(),
            edges: Vec::new(),
            images: Vec::new(),
            typed: false,
        }
    }

    /// Assembles a graph from explicit parts, checking edge invariants.
    pub fn from_parts(level: GraphLevel, nodes: Vec<GraphNode>, edges: Vec<GraphEdge>, images: Vec<ImageNodes>) -> Result<Self> {
        let n = nodes.len();
        if nodes.iter().any(|x| x.feature.len() != nodes[0].feature.len()) {
            return Err(Error::validation("node features differ in width"));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &edges {
            if e.i >= e.j || e.j >= n || !seen.insert((e.i, e.j)) {
                return Err(Error::validation(format!("invalid edge ({}, {})", e.i, e.j)));
            }
        }
        let in_range = |x: &usize| *x < n;
        if !images
            .iter()
            .all(|im| im.image_node.iter().all(in_range) && im.objects.iter().all(in_range))
        {
            return Err(Error::validation("image bookkeeping references missing nodes"));
        }
        Ok(Self {
            level,
            nodes,
            edges,
            images,
            typed: false,
        })
    }

    fn push_node(&mut self, level: NodeLevel, feature: Vec<f64>) -> usize {
        self.nodes.push(GraphNode { level, feature });
        self.nodes.len() - 1
    }

    fn push_edge(&mut self, a: usize, b: usize, ab: Option<EdgeAnnotation>, ba: Option<EdgeAnnotation>) {
        let (i, j, forward, backward) = if a < b { (a, b, ab, ba) } else { (b, a, ba, ab) };
        self.edges.push(GraphEdge { i, j, forward, backward });
    }

    fn complete_over(&mut self, nodes: &[usize]) {
        for (x, &a) in nodes.iter().enumerate() {
            for &b in &nodes[x + 1..] {
                self.push_edge(a, b, None, None);
            }
        }
    }

    fn push_image_objects(&mut self, rec: &SceneRecord, annotator: &dyn EdgeAnnotator, link_objects: bool) -> Result<Vec<usize>> {
        let objects: Vec<usize> = rec
            .regions
            .iter()
            .map(|r| self.push_node(NodeLevel::Object, r.feature.clone()))
            .collect();
        for a in 0..objects.len() {
            for b in a + 1..objects.len() {
                let ab = annotator.annotate(&rec.regions, a, b)?;
                let ba = annotator.annotate(&rec.regions, b, a)?;
                if link_objects {
                    self.push_edge(objects[a], objects[b], Some(ab), Some(ba));
                }
            }
        }
        Ok(objects)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.feature.len())
    }

    pub fn is_typed(&self) -> bool {
        self.typed
    }

    /// Appends the one-hot node-type block to every node feature, once.
    pub fn append_type_embedding(&mut self) {
        if self.typed {
            return;
        }
        for n in &mut self.nodes {
            n.feature.extend(n.level.one_hot());
        }
        self.typed = true;
    }

    pub fn feature_matrix(&self) -> Tensor {
        let d = self.feature_dim();
        let data: Vec<f64> = self.nodes.iter().flat_map(|n| n.feature.iter().copied()).collect();
        Tensor::new(vec![self.nodes.len(), d], data).expect("uniform node features")
    }

    pub fn raw_adjacency(&self) -> Tensor {
        let n = self.nodes.len();
        let mut a = Tensor::zeros(&[n, n]);
        let d = a.data_mut();
        for e in &self.edges {
            d[e.i * n + e.j] = 1.0;
            d[e.j * n + e.i] = 1.0;
        }
        a
    }

    pub fn adjacency(&self) -> Adjacency {
        let raw = self.raw_adjacency();
        let normalized = renormalize(&raw).expect("square non-negative adjacency");
        Adjacency { raw, normalized }
    }

    /// Annotation of the ordered pair `(i, j)`, if the edge carries one.
    pub fn annotation(&self, i: usize, j: usize) -> Option<&EdgeAnnotation> {
        self.edges.iter().find_map(|e| {
            if e.i == i && e.j == j {
                e.forward.as_ref()
            } else if e.i == j && e.j == i {
                e.backward.as_ref()
            } else {
                None
            }
        })
    }

    /// Ordered annotated pairs `(i, j, annotation)`.
    pub fn annotated_pairs(&self) -> Vec<(usize, usize, &EdgeAnnotation)> {
        let mut out = Vec::new();
        for e in &self.edges {
            if let Some(a) = &e.forward {
                out.push((e.i, e.j, a));
            }
            if let Some(a) = &e.backward {
                out.push((e.j, e.i, a));
            }
        }
        out
    }

    pub fn image_index(&self, image_id: &str) -> Result<usize> {
        self.images
            .iter()
            .position(|im| im.image_id == image_id)
            .ok_or_else(|| Error::validation(format!("image {image_id} is not in the graph")))
    }

    /// Node rows the decoder attends to for an image: its object nodes, or
    /// its image node when the graph has no object nodes.
    pub fn decoder_rows(&self, image_id: &str) -> Result<Vec<usize>> {
        self.memory_rows(image_id, false)
    }

    /// [`Self::decoder_rows`], optionally followed by the image node when
    /// the graph has both levels.
    pub fn memory_rows(&self, image_id: &str, with_image_node: bool) -> Result<Vec<usize>> {
        let im = &self.images[self.image_index(image_id)?];
        if im.objects.is_empty() {
            return Ok(im.image_node.into_iter().collect());
        }
        let extra = im.image_node.filter(|_| with_image_node);
        Ok(im.objects.iter().copied().chain(extra).collect())
    }

    /// Relabels nodes so that old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.nodes.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::validation("not a permutation of the node set"));
        }
        let mut nodes = self.nodes.clone();
        for (old, node) in self.nodes.iter().enumerate() {
            nodes[perm[old]] = node.clone();
        }
        let mut out = Self {
            level: self.level,
            nodes,
            edges: Vec::with_capacity(self.edges.len()),
            images: self
                .images
                .iter()
                .map(|im| ImageNodes {
                    image_id: im.image_id.clone(),
                    image_node: im.image_node.map(|x| perm[x]),
                    objects: im.objects.iter().map(|&x| perm[x]).collect(),
                })
                .collect(),
            typed: self.typed,
        };
        for e in &self.edges {
            out.push_edge(perm[e.i], perm[e.j], e.forward.clone(), e.backward.clone());
        }
        Ok(out)
    }

    /// Human-readable node and edge listing.
    pub fn dump(&self) -> String {
        let mut s = format!(
            "graph level={} nodes={} edges={}\n",
            self.level.as_str(),
            self.nodes.len(),
            self.edges.len()
        );
        for im in &self.images {
            let _ = writeln!(s, "image {} node={:?} objects={:?}", im.image_id, im.image_node, im.objects);
        }
        for (k, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(s, "node {k} {}", n.level.as_str());
        }
        let fmt = |a: &Option<EdgeAnnotation>| match a {
            None => "-".to_string(),
            Some(a) => {
                let top = crate::tensor::kernels::argmax(&a.spatial_scores);
                format!("rel={} mix={top}", a.relation)
            }
        };
        for e in &self.edges {
            let _ = writeln!(s, "edge {} {} fwd[{}] bwd[{}]", e.i, e.j, fmt(&e.forward), fmt(&e.backward));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub raw: Tensor,
    pub normalized: Tensor,
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the row sums of `A + I`.
pub fn renormalize(a: &Tensor) -> Result<Tensor> {
    let (n, m) = (a.rows(), a.cols());
    if a.shape().len() != 2 || n != m {
        return Err(Error::shape("renormalize", a.shape(), &[n, n]));
    }
    if a.data().iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::validation("adjacency entries must be finite and non-negative"));
    }
    let mut out = a.data().to_vec();
    for i in 0..n {
        out[i * n + i] += 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / out[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Tensor::new(vec![n, n], out)
}

/// Complete graph over the regions of one image.
pub fn build_object_graph(rec: &SceneRecord, annotator: &dyn EdgeAnnotator) -> Result<SceneGraph> {
    if rec.regions.is_empty() {
        return Err(Error::validation(format!("image {} has no regions", rec.image_id)));
    }
    let mut g = SceneGraph::empty(GraphLevel::Object);
    let objects = g.push_image_objects(rec, annotator, true)?;
    g.images.push(ImageNodes {
        image_id: rec.image_id.clone(),
        image_node: None,
        objects,
    });
    Ok(g)
}

/// Complete graph over the images of one context; each node carries the
/// mean of its image's region features.
pub fn build_image_graph(context: &[&SceneRecord]) -> Result<SceneGraph> {
    if context.is_empty() {
        return Err(Error::validation("image graph needs at least one image"));
    }
    let mut g = SceneGraph::empty(GraphLevel::Image);
    for rec in context {
        if rec.regions.is_empty() {
            return Err(Error::validation(format!("image {} has no regions", rec.image_id)));
        }
        let node = g.push_node(NodeLevel::Image, mean_feature(&rec.regions));
        g.images.push(ImageNodes {
            image_id: rec.image_id.clone(),
            image_node: Some(node),
            objects: Vec::new(),
        });
    }
    let all: Vec<usize> = (0..g.nodes.len()).collect();
    g.complete_over(&all);
    Ok(g)
}

/// Graph over a context's images and their regions. Node order per image is
/// `[image, object_1 .. object_K]`, followed by any scene nodes.
pub fn build_hierarchical_graph(context: &[&SceneRecord], annotator: &dyn EdgeAnnotator, opts: GraphOptions) -> Result<SceneGraph> {
    if context.is_empty() {
        return Err(Error::validation("hierarchical graph needs at least one image"));
    }
    let mut g = SceneGraph::empty(GraphLevel::Hierarchical);
    let literal = opts.mode == HierarchyMode::Literal;
    for rec in context {
        if rec.regions.is_empty() {
            return Err(Error::validation(format!("image {} has no regions", rec.image_id)));
        }
        let img = g.push_node(NodeLevel::Image, mean_feature(&rec.regions));
        let objects = g.push_image_objects(rec, annotator, true)?;
        if !literal {
            for &o in &objects {
                g.push_edge(img, o, None, None);
            }
        }
        g.images.push(ImageNodes {
            image_id: rec.image_id.clone(),
            image_node: Some(img),
            objects,
        });
    }
    if literal {
        // Fill in every pair not already linked inside an image.
        let n = g.nodes.len();
        let mut linked = vec![false; n * n];
        for e in &g.edges {
            linked[e.i * n + e.j] = true;
        }
        for i in 0..n {
            for j in i + 1..n {
                if !linked[i * n + j] {
                    g.push_edge(i, j, None, None);
                }
            }
        }
    } else {
        let image_nodes: Vec<usize> = g.images.iter().filter_map(|im| im.image_node).collect();
        g.complete_over(&image_nodes);
    }
    if opts.scene_nodes {
        let mut supers: Vec<&str> = Vec::new();
        for rec in context {
            if !supers.contains(&rec.superclass.as_str()) {
                supers.push(&rec.superclass);
            }
        }
        for sup in supers {
            let members: Vec<usize> = context
                .iter()
                .zip(&g.images)
                .filter(|(rec, _)| rec.superclass == sup)
                .filter_map(|(_, im)| im.image_node)
                .collect();
            let dim = g.nodes[members[0]].feature.len();
            let mut feat = vec![0.0; dim];
            for &m in &members {
                for (f, v) in feat.iter_mut().zip(&g.nodes[m].feature) {
                    *f += v / members.len() as f64;
                }
            }
            let s = g.push_node(NodeLevel::Scene, feat);
            for m in members {
                g.push_edge(s, m, None, None);
            }
        }
    }
    g.edges.sort_by_key(|e| (e.i, e.j));
    Ok(g)
}

/// Builds the graph used for `context` at `level`. Object level requires a
/// single-image context.
pub fn build_graph(level: GraphLevel, context: &[&SceneRecord], annotator: &dyn EdgeAnnotator, opts: GraphOptions) -> Result<SceneGraph> {
    match level {
        GraphLevel::Object => match context {
            [rec] => build_object_graph(rec, annotator),
            _ => Err(Error::validation("object-level graphs are built per image")),
        },
        GraphLevel::Image => build_image_graph(context),
        GraphLevel::Hierarchical => build_hierarchical_graph(context, annotator, opts),
    }
}
