//! Graph data model, the on-disk bundle format and the stochastic block
//! model generator.
//!
//! A bundle is a directory holding `meta.json`, `features.csv`, `edges.csv`,
//! `labels.csv` and `masks.csv`. Saves are canonical (sorted edges, shortest
//! round-trip float text) so saving the same graph twice yields identical
//! bytes.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::rng;

/// Added to zero degrees before normalising so isolated rows stay finite.
pub const DEGREE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    /// `D̃^{-1/2}(A+I)D̃^{-1/2}`, the Kipf-Welling operator.
    #[default]
    SymNormAdjSelfLoops,
    /// `D^{-1/2}(D-A)D^{-1/2}`.
    NormalizedLaplacian,
}

impl PropagationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PropagationMode::SymNormAdjSelfLoops => "sym_norm_adj_self_loops",
            PropagationMode::NormalizedLaplacian => "normalized_laplacian",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: Array2<f64>,
    edges: Vec<(usize, usize)>,
    labels: Vec<usize>,
    num_classes: usize,
    train_mask: Vec<bool>,
    val_mask: Vec<bool>,
    test_mask: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn empty(n: usize) -> Self {
        Masks {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        }
    }
}

impl Graph {
    /// Builds a graph, normalising every edge to `(min, max)` and sorting.
    /// Self loops and duplicates (in either orientation) are rejected.
    pub fn new(
        features: Array2<f64>,
        edges: Vec<(usize, usize)>,
        labels: Vec<usize>,
        num_classes: usize,
        masks: Masks,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {} nodes",
                labels.len(),
                n
            )));
        }
        for (name, m) in [
            ("train", &masks.train),
            ("val", &masks.val),
            ("test", &masks.test),
        ] {
            if m.len() != n {
                return Err(Error::Dimension(format!(
                    "{name} mask has {} entries for {n} nodes",
                    m.len()
                )));
            }
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::InvalidGraph(format!(
                "label {y} of node {i} is not below num_classes {num_classes}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGraph("non-finite feature value".into()));
        }
        for i in 0..n {
            let count = masks.train[i] as u8 + masks.val[i] as u8 + masks.test[i] as u8;
            if count > 1 {
                return Err(Error::InvalidGraph(format!(
                    "node {i} is in more than one split mask"
                )));
            }
        }
        let mut normalized = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) has an endpoint outside [0, {n})"
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self loop on node {a}")));
            }
            normalized.push((a.min(b), a.max(b)));
        }
        normalized.sort_unstable();
        if let Some(w) = normalized.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidGraph(format!(
                "duplicate edge ({}, {})",
                w[0].0, w[0].1
            )));
        }
        Ok(Graph {
            features,
            edges: normalized,
            labels,
            num_classes,
            train_mask: masks.train,
            val_mask: masks.val,
            test_mask: masks.test,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    /// Sorted undirected edges, each stored once with `src < dst`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn train_mask(&self) -> &[bool] {
        &self.train_mask
    }

    pub fn val_mask(&self) -> &[bool] {
        &self.val_mask
    }

    pub fn test_mask(&self) -> &[bool] {
        &self.test_mask
    }

    pub fn masks(&self) -> Masks {
        Masks {
            train: self.train_mask.clone(),
            val: self.val_mask.clone(),
            test: self.test_mask.clone(),
        }
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes()];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    /// Sorted neighbour lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn adjacency_dense(&self) -> Array2<f64> {
        let n = self.num_nodes();
        let mut a = Array2::zeros((n, n));
        for &(i, j) in &self.edges {
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
        a
    }

    /// Same structure and labels with replaced features.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        if features.dim() != self.features.dim() {
            return Err(Error::Dimension(format!(
                "features {:?} do not match graph {:?}",
                features.dim(),
                self.features.dim()
            )));
        }
        let mut g = self.clone();
        g.features = features;
        Ok(g)
    }

    pub fn with_masks(&self, masks: Masks) -> Result<Self> {
        Graph::new(
            self.features.clone(),
            self.edges.clone(),
            self.labels.clone(),
            self.num_classes,
            masks,
        )
    }

    /// Random train/val/test split: `ceil(train_fraction * N)` training nodes,
    /// `round(val_fraction * N)` validation nodes, the rest test.
    pub fn with_random_split(&self, train_fraction: f64, val_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_fraction)
            || !(0.0..=1.0).contains(&val_fraction)
            || train_fraction + val_fraction > 1.0
        {
            return Err(Error::InvalidParameter(format!(
                "split fractions {train_fraction} + {val_fraction} must lie in [0, 1]"
            )));
        }
        let n = self.num_nodes();
        let n_train = (train_fraction * n as f64).ceil() as usize;
        let n_val = ((val_fraction * n as f64).round() as usize).min(n - n_train);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, "split", &[]));
        let mut masks = Masks::empty(n);
        for (rank, &i) in order.iter().enumerate() {
            if rank < n_train {
                masks.train[i] = true;
            } else if rank < n_train + n_val {
                masks.val[i] = true;
            } else {
                masks.test[i] = true;
            }
        }
        self.with_masks(masks)
    }

    /// Induced subgraph on `nodes` (local id = position in `nodes`).
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        let mut local = vec![usize::MAX; n];
        for (l, &g) in nodes.iter().enumerate() {
            if g >= n {
                return Err(Error::InvalidParameter(format!("node {g} out of range")));
            }
            if local[g] != usize::MAX {
                return Err(Error::InvalidParameter(format!("node {g} listed twice")));
            }
            local[g] = l;
        }
        let features = self.features.select(ndarray::Axis(0), nodes);
        let edges = self
            .edges
            .iter()
            .filter(|&&(a, b)| local[a] != usize::MAX && local[b] != usize::MAX)
            .map(|&(a, b)| (local[a], local[b]))
            .collect();
        let pick = |m: &[bool]| nodes.iter().map(|&g| m[g]).collect::<Vec<_>>();
        Graph::new(
            features,
            edges,
            nodes.iter().map(|&g| self.labels[g]).collect(),
            self.num_classes,
            Masks {
                train: pick(&self.train_mask),
                val: pick(&self.val_mask),
                test: pick(&self.test_mask),
            },
        )
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

/// Dense propagation operator for `g`.
pub fn propagation_matrix(g: &Graph, mode: PropagationMode) -> Array2<f64> {
    propagation_from_dense(&g.adjacency_dense(), mode)
}

/// Propagation operator for a dense, symmetric, zero-diagonal adjacency with
/// non-negative (possibly fractional) weights.
pub fn propagation_from_dense(adj: &Array2<f64>, mode: PropagationMode) -> Array2<f64> {
    let n = adj.nrows();
    let deg: Array1<f64> = adj.sum_axis(ndarray::Axis(1));
    match mode {
        PropagationMode::SymNormAdjSelfLoops => {
            let s: Vec<f64> = deg.iter().map(|d| 1.0 / (d + 1.0).sqrt()).collect();
            Array2::from_shape_fn((n, n), |(i, j)| {
                let a = if i == j { adj[[i, j]] + 1.0 } else { adj[[i, j]] };
                a * (s[i] * s[j])
            })
        }
        PropagationMode::NormalizedLaplacian => {
            let s: Vec<f64> = deg
                .iter()
                .map(|&d| 1.0 / if d > 0.0 { d } else { d + DEGREE_EPS }.sqrt())
                .collect();
            Array2::from_shape_fn((n, n), |(i, j)| {
                if i == j {
                    (deg[i] - adj[[i, i]]) * (s[i] * s[i])
                } else {
                    -adj[[i, j]] * (s[i] * s[j])
                }
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmParams {
    pub blocks: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_centers: Vec<Vec<f64>>,
    pub feature_noise: f64,
}

impl SbmParams {
    /// Block centers drawn as `center_scale * N(0, 1)` vectors from `seed`.
    pub fn with_random_centers(
        blocks: Vec<usize>,
        p_in: f64,
        p_out: f64,
        num_features: usize,
        center_scale: f64,
        feature_noise: f64,
        seed: u64,
    ) -> Self {
        let mut r = rng::stream(seed, "sbm-centers", &[]);
        let feature_centers = (0..blocks.len())
            .map(|_| {
                (0..num_features)
                    .map(|_| center_scale * r.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect()
            })
            .collect();
        SbmParams {
            blocks,
            p_in,
            p_out,
            feature_centers,
            feature_noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return Err(Error::InvalidParameter("block sizes must be positive".into()));
        }
        if !(0.0 <= self.p_out && self.p_out <= self.p_in && self.p_in <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 <= p_out ({}) <= p_in ({}) <= 1",
                self.p_out, self.p_in
            )));
        }
        if self.feature_centers.len() != self.blocks.len() {
            return Err(Error::InvalidParameter(format!(
                "{} feature centers for {} blocks",
                self.feature_centers.len(),
                self.blocks.len()
            )));
        }
        let d = self.feature_centers[0].len();
        if d == 0 || self.feature_centers.iter().any(|c| c.len() != d) {
            return Err(Error::InvalidParameter(
                "feature centers must share one positive width".into(),
            ));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::InvalidParameter("feature_noise must be >= 0".into()));
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.blocks.iter().sum()
    }
}

/// Samples a stochastic block model graph. Node ids are assigned block by
/// block, so node `i` in block `b` has label `b`. Masks are left empty.
pub fn gen_sbm(p: &SbmParams, seed: u64) -> Result<Graph> {
    p.validate()?;
    let n = p.num_nodes();
    let d = p.feature_centers[0].len();
    let block_of: Vec<usize> = p
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(b, &size)| std::iter::repeat_n(b, size))
        .collect();

    let mut edge_rng = rng::stream(seed, "sbm-edges", &[]);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let prob = if block_of[i] == block_of[j] { p.p_in } else { p.p_out };
            if edge_rng.random_bool(prob) {
                edges.push((i, j));
            }
        }
    }

    let noise = Normal::new(0.0, p.feature_noise)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut feat_rng = rng::stream(seed, "sbm-features", &[]);
    let mut features = Array2::zeros((n, d));
    for i in 0..n {
        let center = &p.feature_centers[block_of[i]];
        for f in 0..d {
            features[[i, f]] = center[f] + noise.sample(&mut feat_rng);
        }
    }
    Graph::new(features, edges, block_of, p.blocks.len(), Masks::empty(n))
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            file: file_label(path),
            line: 1,
            message: e.to_string(),
        })
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn check_header(rdr: &mut csv::Reader<std::fs::File>, file: &str, expected: &[String]) -> Result<()> {
    let header = rdr.headers().map_err(|e| Error::Parse {
        file: file.to_string(),
        line: 1,
        message: e.to_string(),
    })?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Parse {
            file: file.to_string(),
            line: 1,
            message: format!("expected header {:?}, found {:?}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

/// Iterates records as `(line, fields)`, enforcing the column count.
fn for_each_row(
    rdr: &mut csv::Reader<std::fs::File>,
    file: &str,
    columns: usize,
    mut f: impl FnMut(u64, &csv::StringRecord) -> Result<()>,
) -> Result<()> {
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            file: file.to_string(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != columns {
            return Err(Error::Parse {
                file: file.to_string(),
                line,
                message: format!("expected {columns} fields, found {}", rec.len()),
            });
        }
        f(line, &rec)?;
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(file: &str, line: u64, s: &str, what: &str) -> Result<T> {
    s.trim().parse::<T>().map_err(|_| Error::Parse {
        file: file.to_string(),
        line,
        message: format!("cannot parse {what} from {s:?}"),
    })
}

fn parse_node(file: &str, line: u64, s: &str, n: usize, seen: &mut [bool]) -> Result<usize> {
    let node: usize = parse_field(file, line, s, "node id")?;
    if node >= n {
        return Err(Error::Parse {
            file: file.to_string(),
            line,
            message: format!("node {node} outside [0, {n})"),
        });
    }
    if std::mem::replace(&mut seen[node], true) {
        return Err(Error::Parse {
            file: file.to_string(),
            line,
            message: format!("node {node} listed twice"),
        });
    }
    Ok(node)
}

fn require_all(file: &str, seen: &[bool]) -> Result<()> {
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Dimension(format!("{file} has no row for node {i}")));
    }
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<Graph> {
    let meta: Meta = serde_json::from_str(&fsio::read_to_string(&dir.join("meta.json"))?)?;
    let (n, d, c) = (meta.num_nodes, meta.num_features, meta.num_classes);

    let file = "features.csv";
    let mut rdr = csv_reader(&dir.join(file))?;
    let header: Vec<String> = std::iter::once("node".to_string())
        .chain((0..d).map(|f| format!("f{f}")))
        .collect();
    check_header(&mut rdr, file, &header)?;
    let mut features = Array2::zeros((n, d));
    let mut seen = vec![false; n];
    for_each_row(&mut rdr, file, d + 1, |line, rec| {
        let node = parse_node(file, line, &rec[0], n, &mut seen)?;
        for f in 0..d {
            features[[node, f]] = parse_field::<f64>(file, line, &rec[f + 1], "feature")?;
        }
        Ok(())
    })?;
    require_all(file, &seen)?;

    let file = "edges.csv";
    let mut rdr = csv_reader(&dir.join(file))?;
    check_header(&mut rdr, file, &["src".into(), "dst".into()])?;
    let mut edges = Vec::new();
    let mut edge_set = BTreeSet::new();
    for_each_row(&mut rdr, file, 2, |line, rec| {
        let a: usize = parse_field(file, line, &rec[0], "src")?;
        let b: usize = parse_field(file, line, &rec[1], "dst")?;
        if a >= n || b >= n {
            return Err(Error::Parse {
                file: file.to_string(),
                line,
                message: format!("edge ({a}, {b}) outside [0, {n})"),
            });
        }
        if a == b {
            return Err(Error::SelfLoop {
                file: file.to_string(),
                line,
                node: a,
            });
        }
        let key = (a.min(b), a.max(b));
        if !edge_set.insert(key) {
            return Err(Error::DuplicateEdge {
                file: file.to_string(),
                line,
                src: a,
                dst: b,
            });
        }
        edges.push(key);
        Ok(())
    })?;

    let file = "labels.csv";
    let mut rdr = csv_reader(&dir.join(file))?;
    check_header(&mut rdr, file, &["node".into(), "label".into()])?;
    let mut labels = vec![0usize; n];
    let mut seen = vec![false; n];
    for_each_row(&mut rdr, file, 2, |line, rec| {
        let node = parse_node(file, line, &rec[0], n, &mut seen)?;
        let y: usize = parse_field(file, line, &rec[1], "label")?;
        if y >= c {
            return Err(Error::Parse {
                file: file.to_string(),
                line,
                message: format!("label {y} is not below num_classes {c}"),
            });
        }
        labels[node] = y;
        Ok(())
    })?;
    require_all(file, &seen)?;

    let file = "masks.csv";
    let mut rdr = csv_reader(&dir.join(file))?;
    check_header(
        &mut rdr,
        file,
        &["node".into(), "train".into(), "val".into(), "test".into()],
    )?;
    let mut masks = Masks::empty(n);
    let mut seen = vec![false; n];
    for_each_row(&mut rdr, file, 4, |line, rec| {
        let node = parse_node(file, line, &rec[0], n, &mut seen)?;
        let flag = |s: &str| -> Result<bool> {
            match s.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Parse {
                    file: file.to_string(),
                    line,
                    message: format!("mask flag must be 0 or 1, found {other:?}"),
                }),
            }
        };
        masks.train[node] = flag(&rec[1])?;
        masks.val[node] = flag(&rec[2])?;
        masks.test[node] = flag(&rec[3])?;
        Ok(())
    })?;
    require_all(file, &seen)?;

    Graph::new(features, edges, labels, c, masks)
}

pub fn save_bundle(g: &Graph, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        num_nodes: g.num_nodes(),
        num_features: g.num_features(),
        num_classes: g.num_classes(),
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    fsio::write_atomic_str(&dir.join("meta.json"), &json)?;

    let mut s = String::from("node");
    for f in 0..g.num_features() {
        let _ = write!(s, ",f{f}");
    }
    s.push('\n');
    for (i, row) in g.features().outer_iter().enumerate() {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    fsio::write_atomic_str(&dir.join("features.csv"), &s)?;

    let mut s = String::from("src,dst\n");
    for &(a, b) in g.edges() {
        let _ = writeln!(s, "{a},{b}");
    }
    fsio::write_atomic_str(&dir.join("edges.csv"), &s)?;

    let mut s = String::from("node,label\n");
    for (i, y) in g.labels().iter().enumerate() {
        let _ = writeln!(s, "{i},{y}");
    }
    fsio::write_atomic_str(&dir.join("labels.csv"), &s)?;

    let mut s = String::from("node,train,val,test\n");
    for i in 0..g.num_nodes() {
        let _ = writeln!(
            s,
            "{i},{},{},{}",
            g.train_mask[i] as u8, g.val_mask[i] as u8, g.test_mask[i] as u8
        );
    }
    fsio::write_atomic_str(&dir.join("masks.csv"), &s)
}

/// Files making up a bundle, relative to its directory.
pub const BUNDLE_FILES: [&str; 5] = [
    "meta.json",
    "features.csv",
    "edges.csv",
    "labels.csv",
    "masks.csv",
];
