//! Graphs, node-classification datasets, the on-disk directory format, and
//! synthetic generators.
//!
//! A dataset directory holds:
//!
//! ```text
//! edges.tsv          u<TAB>v per line, directed edge u -> v, 0-indexed
//! features.csv       one comma-separated row of floats per node
//! labels.txt         one class index per line
//! splits/train.txt   one node id per line (likewise val.txt, test.txt)
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adcore::{AdError, SegmentIndex, Tensor};
use crate::fmt_f64;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Malformed { file: String, line: usize, msg: String },
    #[error("{file}:{line}: index {index} out of range (bound {bound})")]
    OutOfRange { file: String, line: usize, index: usize, bound: usize },
    #[error("edge ({0}, {1}) out of range for {2} nodes")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("node {node} appears in both {first} and {second} splits")]
    OverlappingMasks { node: usize, first: &'static str, second: &'static str },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("block {0} is empty")]
    EmptyBlock(usize),
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Immutable directed graph stored as in-neighbor lists.
///
/// Edges are sorted by (target, source); `sources()[e]` is the tail of edge
/// `e` and `segments()` groups edges by their head.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    sources: Arc<[usize]>,
    targets: Arc<[usize]>,
    segments: Arc<SegmentIndex>,
    self_loops_added: bool,
}

impl Graph {
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut sorted: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(GraphError::EdgeOutOfRange(u, v, num_nodes));
            }
            sorted.push((v, u));
        }
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(GraphError::DuplicateEdge(w[0].1, w[0].0));
        }
        let sources: Vec<usize> = sorted.iter().map(|&(_, u)| u).collect();
        let targets: Vec<usize> = sorted.iter().map(|&(v, _)| v).collect();
        let segments = SegmentIndex::from_sorted_targets(targets.clone(), num_nodes)?;
        Ok(Graph {
            num_nodes,
            sources: sources.into(),
            targets: targets.into(),
            segments: Arc::new(segments),
            self_loops_added: false,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }

    pub fn sources(&self) -> &Arc<[usize]> {
        &self.sources
    }

    pub fn targets(&self) -> &Arc<[usize]> {
        &self.targets
    }

    pub fn segments(&self) -> &Arc<SegmentIndex> {
        &self.segments
    }

    pub fn self_loops_added(&self) -> bool {
        self.self_loops_added
    }

    /// Edges as (source, target) pairs in storage order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sources.iter().copied().zip(self.targets.iter().copied())
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.in_neighbors(v).contains(&u)
    }

    pub fn in_neighbors(&self, v: usize) -> &[usize] {
        &self.sources[self.segments.segment(v)]
    }

    pub fn in_degree(&self, v: usize) -> usize {
        self.segments.degree(v)
    }

    pub fn out_degree(&self, u: usize) -> usize {
        self.sources.iter().filter(|&&s| s == u).count()
    }

    /// Adds `(v, v)` for every node lacking it. Idempotent.
    pub fn add_self_loops(&self) -> Graph {
        let mut edges: Vec<(usize, usize)> = self.edges().collect();
        for v in 0..self.num_nodes {
            if !self.has_edge(v, v) {
                edges.push((v, v));
            }
        }
        let mut g = Graph::from_edges(self.num_nodes, &edges).expect("self loops keep the edge set valid");
        g.self_loops_added = true;
        g
    }

    /// Nodes with no incident edges other than a self-loop.
    pub fn isolated_nodes(&self) -> Vec<usize> {
        let mut touched = vec![false; self.num_nodes];
        for (u, v) in self.edges() {
            if u != v {
                touched[u] = true;
                touched[v] = true;
            }
        }
        (0..self.num_nodes).filter(|&v| !touched[v]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Node-classification dataset; `h^0` is the raw feature row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graph: Graph,
    pub features: Tensor,
    pub labels: Arc<[usize]>,
    pub num_classes: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn new(
        graph: Graph,
        features: Tensor,
        labels: Vec<usize>,
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self, GraphError> {
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        let ds = Dataset { graph, features, labels: labels.into(), num_classes, train, val, test };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Boolean membership array of a split.
    pub fn mask(&self, split: Split) -> Vec<bool> {
        let mut m = vec![false; self.num_nodes()];
        for &v in self.split(split) {
            m[v] = true;
        }
        m
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.graph.num_nodes();
        if self.features.rows() != n {
            return Err(GraphError::Inconsistent(format!("{} feature rows for {n} nodes", self.features.rows())));
        }
        if self.labels.len() != n {
            return Err(GraphError::Inconsistent(format!("{} labels for {n} nodes", self.labels.len())));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(GraphError::Inconsistent(format!("label {y} >= {} classes", self.num_classes)));
        }
        let mut owner: Vec<Option<&'static str>> = vec![None; n];
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &v in ids {
                if v >= n {
                    return Err(GraphError::Inconsistent(format!("{name} split node {v} >= {n}")));
                }
                if let Some(first) = owner[v] {
                    return Err(GraphError::OverlappingMasks { node: v, first, second: name });
                }
                owner[v] = Some(name);
            }
        }
        Ok(())
    }

    pub fn with_self_loops(&self) -> Dataset {
        Dataset { graph: self.graph.add_self_loops(), ..self.clone() }
    }
}

fn read(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|source| GraphError::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, contents: &str) -> Result<(), GraphError> {
    fs::write(path, contents).map_err(|source| GraphError::Io { path: path.to_path_buf(), source })
}

/// Non-blank lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty())
}

fn parse_index(file: &str, line: usize, tok: &str) -> Result<usize, GraphError> {
    tok.trim().parse().map_err(|_| GraphError::Malformed {
        file: file.to_string(),
        line,
        msg: format!("expected a non-negative integer, got {tok:?}"),
    })
}

fn parse_ids(dir: &Path, name: &str, n: usize) -> Result<Vec<usize>, GraphError> {
    let file = format!("splits/{name}.txt");
    let text = read(&dir.join("splits").join(format!("{name}.txt")))?;
    let mut ids = Vec::new();
    for (ln, l) in lines(&text) {
        let v = parse_index(&file, ln, l)?;
        if v >= n {
            return Err(GraphError::OutOfRange { file, line: ln, index: v, bound: n });
        }
        ids.push(v);
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Loads and validates a dataset directory.
///
/// The node count is the number of labels. Isolated nodes are kept and
/// reported through a warning; the trainer leaves them out of the loss.
pub fn load_dataset(dir: &Path) -> Result<Dataset, GraphError> {
    let labels_text = read(&dir.join("labels.txt"))?;
    let mut labels = Vec::new();
    for (ln, l) in lines(&labels_text) {
        labels.push(parse_index("labels.txt", ln, l)?);
    }
    let n = labels.len();

    let feat_text = read(&dir.join("features.csv"))?;
    let mut feat = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (ln, l) in lines(&feat_text) {
        let mut count = 0;
        for tok in l.split(',') {
            let x: f64 = tok.trim().parse().map_err(|_| GraphError::Malformed {
                file: "features.csv".into(),
                line: ln,
                msg: format!("expected a float, got {tok:?}"),
            })?;
            if !x.is_finite() {
                return Err(GraphError::Malformed {
                    file: "features.csv".into(),
                    line: ln,
                    msg: "non-finite feature".into(),
                });
            }
            feat.push(x);
            count += 1;
        }
        match dim {
            None => dim = Some(count),
            Some(d) if d != count => {
                return Err(GraphError::Malformed {
                    file: "features.csv".into(),
                    line: ln,
                    msg: format!("expected {d} columns, got {count}"),
                })
            }
            _ => {}
        }
        rows += 1;
    }
    if rows != n {
        return Err(GraphError::Inconsistent(format!("{rows} feature rows but {n} labels")));
    }
    let features = Tensor::new(n, dim.unwrap_or(0), feat)?;

    let edge_text = read(&dir.join("edges.tsv"))?;
    let mut edges = Vec::new();
    let mut seen = HashSet::new();
    for (ln, l) in lines(&edge_text) {
        let parts: Vec<&str> = l.split('\t').collect();
        if parts.len() != 2 {
            return Err(GraphError::Malformed {
                file: "edges.tsv".into(),
                line: ln,
                msg: format!("expected \"u<TAB>v\", got {l:?}"),
            });
        }
        let u = parse_index("edges.tsv", ln, parts[0])?;
        let v = parse_index("edges.tsv", ln, parts[1])?;
        for x in [u, v] {
            if x >= n {
                return Err(GraphError::OutOfRange { file: "edges.tsv".into(), line: ln, index: x, bound: n });
            }
        }
        if !seen.insert((u, v)) {
            return Err(GraphError::Malformed {
                file: "edges.tsv".into(),
                line: ln,
                msg: format!("duplicate edge ({u}, {v})"),
            });
        }
        edges.push((u, v));
    }
    let graph = Graph::from_edges(n, &edges)?;

    let train = parse_ids(dir, "train", n)?;
    let val = parse_ids(dir, "val", n)?;
    let test = parse_ids(dir, "test", n)?;
    let ds = Dataset::new(graph, features, labels, train, val, test)?;

    let isolated = ds.graph.isolated_nodes();
    if !isolated.is_empty() {
        log::warn!("{}: {} isolated node(s); they are excluded from the training loss", dir.display(), isolated.len());
    }
    Ok(ds)
}

/// Writes the canonical form of a dataset: edges sorted by (source, target),
/// floats with 17 significant digits, split ids ascending.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), GraphError> {
    let mk = |p: &Path| fs::create_dir_all(p).map_err(|source| GraphError::Io { path: p.to_path_buf(), source });
    mk(dir)?;
    mk(&dir.join("splits"))?;

    let mut edges: Vec<(usize, usize)> = ds.graph.edges().collect();
    edges.sort_unstable();
    let mut s = String::new();
    for (u, v) in edges {
        writeln!(s, "{u}\t{v}").unwrap();
    }
    write(&dir.join("edges.tsv"), &s)?;

    let mut s = String::new();
    for r in 0..ds.features.rows() {
        let row: Vec<String> = ds.features.row(r).iter().map(|&x| fmt_f64(x)).collect();
        writeln!(s, "{}", row.join(",")).unwrap();
    }
    write(&dir.join("features.csv"), &s)?;

    let mut s = String::new();
    for y in ds.labels.iter() {
        writeln!(s, "{y}").unwrap();
    }
    write(&dir.join("labels.txt"), &s)?;

    for (name, ids) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        let mut s = String::new();
        for v in sorted {
            writeln!(s, "{v}").unwrap();
        }
        write(&dir.join("splits").join(format!("{name}.txt")), &s)?;
    }
    Ok(())
}

/// Parameters of the stochastic block model generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmParams {
    pub blocks: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub feat_dim: usize,
    #[serde(default)]
    pub seed: u64,
    /// Mean offset added to feature coordinate `block % feat_dim`.
    #[serde(default = "default_shift")]
    pub feature_shift: f64,
}

fn default_shift() -> f64 {
    1.0
}

impl SbmParams {
    pub fn new(blocks: Vec<usize>, p_in: f64, p_out: f64, feat_dim: usize, seed: u64) -> Self {
        SbmParams { blocks, p_in, p_out, feat_dim, seed, feature_shift: default_shift() }
    }
}

/// Undirected stochastic block model stored with both edge directions.
///
/// Labels are block ids; features are standard normal with a per-block mean
/// shift; nodes are split 60/20/20 at random.
pub fn gen_sbm(params: &SbmParams) -> Result<Dataset, GraphError> {
    for p in [params.p_in, params.p_out] {
        if !(0.0..=1.0).contains(&p) {
            return Err(GraphError::InvalidProbability(p));
        }
    }
    if let Some(b) = params.blocks.iter().position(|&s| s == 0) {
        return Err(GraphError::EmptyBlock(b));
    }
    if params.feat_dim == 0 {
        return Err(GraphError::Inconsistent("feat_dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let labels: Vec<usize> =
        params.blocks.iter().enumerate().flat_map(|(b, &size)| std::iter::repeat_n(b, size)).collect();
    let n = labels.len();

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { params.p_in } else { params.p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
                edges.push((v, u));
            }
        }
    }
    let graph = Graph::from_edges(n, &edges)?;

    let d = params.feat_dim;
    let mut feat = Vec::with_capacity(n * d);
    for &y in &labels {
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            let shift = if j == y % d { params.feature_shift } else { 0.0 };
            feat.push(noise + shift);
        }
    }
    let features = Tensor::new(n, d, feat)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (n as f64 * 0.6).round() as usize;
    let n_val = (n as f64 * 0.2).round() as usize;
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..(n_train + n_val).min(n)].to_vec();
    let mut test = order[(n_train + n_val).min(n)..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Dataset::new(graph, features, labels, train, val, test)
}

#[rustfmt::skip]
const KARATE_EDGES: [(usize, usize); 78] = [
    (0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6), (0, 7), (0, 8), (0, 10), (0, 11),
    (0, 12), (0, 13), (0, 17), (0, 19), (0, 21), (0, 31), (1, 2), (1, 3), (1, 7), (1, 13),
    (1, 17), (1, 19), (1, 21), (1, 30), (2, 3), (2, 7), (2, 8), (2, 9), (2, 13), (2, 27),
    (2, 28), (2, 32), (3, 7), (3, 12), (3, 13), (4, 6), (4, 10), (5, 6), (5, 10), (5, 16),
    (6, 16), (8, 30), (8, 32), (8, 33), (9, 33), (13, 33), (14, 32), (14, 33), (15, 32), (15, 33),
    (18, 32), (18, 33), (19, 33), (20, 32), (20, 33), (22, 32), (22, 33), (23, 25), (23, 27), (23, 29),
    (23, 32), (23, 33), (24, 25), (24, 27), (24, 31), (25, 31), (26, 29), (26, 33), (27, 33), (28, 31),
    (28, 33), (29, 32), (29, 33), (30, 32), (30, 33), (31, 32), (31, 33), (32, 33),
];

#[rustfmt::skip]
const KARATE_FACTION: [usize; 34] = [
    0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1,
];

/// Zachary's karate club: 34 nodes, 78 undirected edges stored in both
/// directions, identity features, faction labels. Node `v` is in the train
/// split when `v % 5 < 3`, val when `v % 5 == 3`, test otherwise.
pub fn karate_fixture() -> Dataset {
    let n = KARATE_FACTION.len();
    let edges: Vec<(usize, usize)> = KARATE_EDGES.iter().flat_map(|&(u, v)| [(u, v), (v, u)]).collect();
    let graph = Graph::from_edges(n, &edges).expect("fixture edges are valid");
    let split = |r: &dyn Fn(usize) -> bool| (0..n).filter(|&v| r(v)).collect::<Vec<_>>();
    Dataset::new(
        graph,
        Tensor::identity(n),
        KARATE_FACTION.to_vec(),
        split(&|v| v % 5 < 3),
        split(&|v| v % 5 == 3),
        split(&|v| v % 5 == 4),
    )
    .expect("fixture is consistent")
}
