//! Prototype matching: per-client class prototypes from reconstructed
//! subgraphs, cosine assignment of target nodes to clients, and the
//! degree/clustering KL similarity between two graphs.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fsio;
use crate::gnn::{self, ModelParams};
use crate::graph::Graph;

/// Class prototypes of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// `means[c]` is the prototype of class `c`, absent if the client has
    /// no reconstructed node of that class.
    pub means: Vec<Option<Array1<f64>>>,
    pub counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn classes(&self) -> Vec<usize> {
        (0..self.means.len()).filter(|&c| self.means[c].is_some()).collect()
    }

    pub fn get(&self, class: usize) -> Option<&Array1<f64>> {
        self.means.get(class).and_then(|m| m.as_ref())
    }
}

/// Per-class means of `embeddings` rows over the listed `classes`.
pub fn prototypes_from_embeddings(
    embeddings: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
    classes: &[usize],
    client: usize,
) -> Result<PrototypeSet> {
    if labels.len() != embeddings.nrows() {
        return Err(Error::Dimension(format!("{} labels for {} rows", labels.len(), embeddings.nrows())));
    }
    let mut means = vec![None; num_classes];
    let mut counts = vec![0; num_classes];
    for &c in classes {
        if c >= num_classes {
            return Err(Error::InvalidParameter(format!("class {c} out of range")));
        }
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.is_empty() {
            return Err(Error::EmptyClass { client, class: c });
        }
        let mut acc = Array1::zeros(embeddings.ncols());
        for &i in &rows {
            acc += &embeddings.row(i);
        }
        acc /= rows.len() as f64;
        counts[c] = rows.len();
        means[c] = Some(acc);
    }
    if classes.is_empty() {
        return Err(Error::Empty(format!("client {client} has no classes")));
    }
    Ok(PrototypeSet { means, counts })
}

/// Prototypes for every reconstructed client graph, over the classes
/// present in its labels.
pub fn build_prototypes(global: &ModelParams, recon: &[Graph]) -> Result<Vec<PrototypeSet>> {
    recon
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let e = gnn::first_layer_embedding(global, g)?;
            let classes: Vec<usize> = (0..global.num_classes())
                .filter(|&c| g.labels().contains(&c))
                .collect();
            prototypes_from_embeddings(&e, g.labels(), global.num_classes(), &classes, k)
        })
        .collect()
}

fn cosine_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 2.0;
    }
    (1.0 - a.dot(&b) / (na * nb)).clamp(0.0, 2.0)
}

/// `(k̂, d)` for one embedding of class `label`; `d[k]` is infinite when
/// client `k` has no prototype of that class.
pub fn assign_embedding(
    e: ArrayView1<f64>,
    label: usize,
    node: usize,
    prototypes: &[PrototypeSet],
) -> Result<(usize, Vec<f64>)> {
    let d: Vec<f64> = prototypes
        .iter()
        .map(|p| p.get(label).map_or(f64::INFINITY, |mu| cosine_distance(e, mu.view())))
        .collect();
    let mut best: Option<usize> = None;
    for (k, &v) in d.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| v < d[b]) {
            best = Some(k);
        }
    }
    best.map(|k| (k, d))
        .ok_or(Error::NoCandidate { node, class: label })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub node: usize,
    pub pred: usize,
    pub distances: Vec<f64>,
}

impl Assignment {
    pub fn distance(&self) -> f64 {
        self.distances[self.pred]
    }
}

/// Assigns each queried target node to the client whose prototype of the
/// node's class is nearest in cosine distance.
pub fn assign_owners(
    global: &ModelParams,
    target: &Graph,
    nodes: &[usize],
    prototypes: &[PrototypeSet],
) -> Result<Vec<Assignment>> {
    let e = gnn::first_layer_embedding(global, target)?;
    nodes
        .iter()
        .map(|&i| {
            if i >= target.num_nodes() {
                return Err(Error::Dimension(format!("node {i} outside the target graph")));
            }
            let (pred, distances) = assign_embedding(e.row(i), target.labels()[i], i, prototypes)?;
            Ok(Assignment {
                node: i,
                pred,
                distances,
            })
        })
        .collect()
}

pub fn assign_owner(
    global: &ModelParams,
    target: &Graph,
    node: usize,
    prototypes: &[PrototypeSet],
) -> Result<(usize, Vec<f64>)> {
    let a = assign_owners(global, target, &[node], prototypes)?.remove(0);
    Ok((a.pred, a.distances))
}

pub fn ownership_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Empty("no queried nodes".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!("{} predictions for {} nodes", pred.len(), truth.len())));
    }
    Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

pub fn ownership_csv(assignments: &[Assignment], truth: &[usize]) -> String {
    let mut s = String::from("node,true_client,pred_client,distance\n");
    for (a, t) in assignments.iter().zip(truth) {
        s.push_str(&format!("{},{t},{},{}\n", a.node, a.pred, a.distance()));
    }
    s
}

pub fn save_ownership_csv(assignments: &[Assignment], truth: &[usize], path: &Path) -> Result<()> {
    fsio::write_atomic_str(path, &ownership_csv(assignments, truth))
}

pub fn prototypes_to_checkpoint(sets: &[PrototypeSet]) -> Checkpoint {
    let mut ck = Checkpoint::new(json!({
        "kind": "prototypes",
        "clients": sets.len(),
        "classes": sets.iter().map(|s| s.classes()).collect::<Vec<_>>(),
        "counts": sets.iter().map(|s| s.counts.clone()).collect::<Vec<_>>(),
    }));
    for (k, s) in sets.iter().enumerate() {
        for c in s.classes() {
            ck.push_vector(format!("k{k}/c{c}"), s.get(c).expect("listed class"));
        }
    }
    ck
}

pub fn prototypes_from_checkpoint(ck: &Checkpoint) -> Result<Vec<PrototypeSet>> {
    let counts: Vec<Vec<usize>> = serde_json::from_value(
        ck.meta
            .get("counts")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("prototypes missing counts".into()))?,
    )?;
    counts
        .into_iter()
        .enumerate()
        .map(|(k, counts)| {
            let means = counts
                .iter()
                .enumerate()
                .map(|(c, &n)| if n > 0 { ck.vector(&format!("k{k}/c{c}")).map(Some) } else { Ok(None) })
                .collect::<Result<_>>()?;
            Ok(PrototypeSet { means, counts })
        })
        .collect()
}

/// Local clustering coefficient of every node; 0 below degree 2.
pub fn clustering_coefficients(g: &Graph) -> Vec<f64> {
    let nbrs = g.neighbors();
    let sets: Vec<std::collections::HashSet<usize>> = nbrs.iter().map(|v| v.iter().copied().collect()).collect();
    nbrs.iter()
        .map(|v| {
            let d = v.len();
            if d < 2 {
                return 0.0;
            }
            let mut links = 0usize;
            for (a, &i) in v.iter().enumerate() {
                for &j in &v[a + 1..] {
                    if sets[i].contains(&j) {
                        links += 1;
                    }
                }
            }
            2.0 * links as f64 / (d * (d - 1)) as f64
        })
        .collect()
}

fn floored_kl(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(eps), b.max(eps));
            a * (a / b).ln()
        })
        .sum()
}

/// Bin index of a clustering coefficient in `[0, 1]` split into `bins`
/// equal bins, the last one closed.
fn cc_bin(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor() as usize).min(bins - 1)
}

/// `KL(p1‖p2) + KL(q1‖q2)` over floored degree and clustering histograms.
pub fn structural_similarity_kl(g_inv: &Graph, g_shadow: &Graph, bins: usize, eps: f64) -> Result<f64> {
    if g_inv.num_nodes() == 0 || g_shadow.num_nodes() == 0 {
        return Err(Error::Empty("structural similarity needs non-empty graphs".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidParameter("at least one clustering bin".into()));
    }
    let (d1, d2) = (g_inv.degrees(), g_shadow.degrees());
    let mut support: Vec<usize> = d1.iter().chain(&d2).copied().collect();
    support.sort_unstable();
    support.dedup();
    let hist = |d: &[usize]| -> Vec<f64> {
        support
            .iter()
            .map(|&k| d.iter().filter(|&&x| x == k).count() as f64 / d.len() as f64)
            .collect()
    };
    let cc_hist = |g: &Graph| -> Vec<f64> {
        let cc = clustering_coefficients(g);
        let mut h = vec![0.0; bins];
        for v in &cc {
            h[cc_bin(*v, bins)] += 1.0;
        }
        h.iter().map(|c| c / cc.len() as f64).collect()
    };
    Ok(floored_kl(&hist(&d1), &hist(&d2), eps) + floored_kl(&cc_hist(g_inv), &cc_hist(g_shadow), eps))
}
