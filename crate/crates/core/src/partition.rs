//! Balanced K-way partitioning (edge-cut objective) and import of
//! externally computed partitions such as METIS output.
//!
//! The built-in partitioner grows K parts breadth-first from spread-out
//! seeds, then runs greedy single-node boundary moves (lowest node id
//! first) that strictly reduce the cut while respecting the size cap
//! `ceil((1 + balance_tol) * N / K)`.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fsio;
use crate::graph::Graph;
use crate::rng;

pub const DEFAULT_BALANCE_TOL: f64 = 0.1;
pub const REFINEMENT_PASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    assignment: Vec<usize>,
    k: usize,
    /// Global node ids of each part, ascending; position = local id.
    members: Vec<Vec<usize>>,
    subgraphs: Vec<Graph>,
}

impl Partition {
    /// Validates `assignment` against `g` and builds the induced subgraphs.
    pub fn from_assignment(g: &Graph, assignment: Vec<usize>, k: usize) -> Result<Self> {
        if assignment.len() != g.num_nodes() {
            return Err(Error::IncompleteAssignment(assignment.len().min(g.num_nodes())));
        }
        if k == 0 {
            return Err(Error::InvalidParameter("K must be at least 1".into()));
        }
        let mut members = vec![Vec::new(); k];
        for (v, &part) in assignment.iter().enumerate() {
            if part >= k {
                return Err(Error::PartOutOfRange { part, k });
            }
            members[part].push(v);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::EmptyPart(empty));
        }
        let subgraphs = members
            .iter()
            .map(|m| g.induced_subgraph(m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Partition {
            assignment,
            k,
            members,
            subgraphs,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn members(&self, part: usize) -> &[usize] {
        &self.members[part]
    }

    /// Local-to-global id tables for every part.
    pub fn local_to_global(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn subgraph(&self, part: usize) -> &Graph {
        &self.subgraphs[part]
    }

    pub fn subgraphs(&self) -> &[Graph] {
        &self.subgraphs
    }

    pub fn part_sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("node,part\n");
        for (v, p) in self.assignment.iter().enumerate() {
            let _ = writeln!(s, "{v},{p}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic_str(path, &self.to_csv())
    }
}

pub fn edge_cut(g: &Graph, p: &Partition) -> usize {
    cut_of(g, p.assignment())
}

fn cut_of(g: &Graph, assignment: &[usize]) -> usize {
    g.edges()
        .iter()
        .filter(|&&(a, b)| assignment[a] != assignment[b])
        .count()
}

/// K×C label counts per part.
pub fn class_distribution(p: &Partition) -> Vec<Vec<usize>> {
    p.subgraphs.iter().map(Graph::label_histogram).collect()
}

pub fn max_part_size(n: usize, k: usize, balance_tol: f64) -> usize {
    ((1.0 + balance_tol) * n as f64 / k as f64).ceil() as usize
}

pub fn partition(g: &Graph, k: usize, balance_tol: f64, seed: u64) -> Result<Partition> {
    partition_with_trace(g, k, balance_tol, seed).map(|(p, _)| p)
}

/// Like [`partition`], also returning the edge cut after growth followed by
/// the cut after every refinement pass.
pub fn partition_with_trace(
    g: &Graph,
    k: usize,
    balance_tol: f64,
    seed: u64,
) -> Result<(Partition, Vec<usize>)> {
    let n = g.num_nodes();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "K = {k} must lie in [1, N = {n}]"
        )));
    }
    if !(balance_tol >= 0.0 && balance_tol.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "balance_tol must be >= 0, got {balance_tol}"
        )));
    }
    let adj = g.neighbors();
    let mut assignment = grow(&adj, k, seed);
    let mut trace = vec![cut_of(g, &assignment)];
    let cap = max_part_size(n, k, balance_tol);
    for _ in 0..REFINEMENT_PASSES {
        let moved = refine_pass(&adj, &mut assignment, k, cap);
        trace.push(cut_of(g, &assignment));
        if moved == 0 {
            break;
        }
    }
    Ok((Partition::from_assignment(g, assignment, k)?, trace))
}

fn bfs_distances(adj: &[Vec<usize>], sources: &[usize]) -> Vec<usize> {
    let mut dist = vec![usize::MAX; adj.len()];
    let mut queue = VecDeque::new();
    for &s in sources {
        dist[s] = 0;
        queue.push_back(s);
    }
    while let Some(v) = queue.pop_front() {
        for &u in &adj[v] {
            if dist[u] == usize::MAX {
                dist[u] = dist[v] + 1;
                queue.push_back(u);
            }
        }
    }
    dist
}

/// Random first seed, then repeatedly the node farthest (BFS hops) from the
/// chosen seeds; unreachable nodes count as infinitely far, ties go to the
/// lowest id.
fn pick_seeds(adj: &[Vec<usize>], k: usize, seed: u64) -> Vec<usize> {
    let n = adj.len();
    let mut r = rng::stream(seed, "partition-seed", &[]);
    let mut seeds = vec![r.random_range(0..n)];
    while seeds.len() < k {
        let dist = bfs_distances(adj, &seeds);
        let mut best = None;
        for v in 0..n {
            if seeds.contains(&v) {
                continue;
            }
            if best.is_none_or(|b: usize| dist[v] > dist[b]) {
                best = Some(v);
            }
        }
        seeds.push(best.expect("k <= n leaves a free node"));
    }
    seeds
}

fn grow(adj: &[Vec<usize>], k: usize, seed: u64) -> Vec<usize> {
    let n = adj.len();
    let target = n.div_ceil(k);
    let mut assignment = vec![usize::MAX; n];
    let mut sizes = vec![0usize; k];
    let mut queues: Vec<VecDeque<usize>> = vec![VecDeque::new(); k];
    for (part, s) in pick_seeds(adj, k, seed).into_iter().enumerate() {
        assignment[s] = part;
        sizes[part] = 1;
        queues[part].extend(adj[s].iter().copied());
    }
    let mut assigned = k;
    while assigned < n {
        let mut progressed = false;
        for part in 0..k {
            if sizes[part] >= target {
                continue;
            }
            while let Some(v) = queues[part].pop_front() {
                if assignment[v] == usize::MAX {
                    assignment[v] = part;
                    sizes[part] += 1;
                    assigned += 1;
                    queues[part].extend(adj[v].iter().copied());
                    progressed = true;
                    break;
                }
            }
        }
        if !progressed && assigned < n {
            // Every growing part is stalled: restart the smallest open part
            // at the lowest unassigned node.
            let v = assignment.iter().position(|&a| a == usize::MAX).unwrap();
            let part = (0..k)
                .filter(|&p| sizes[p] < target)
                .min_by_key(|&p| (sizes[p], p))
                .expect("k * ceil(n/k) >= n");
            assignment[v] = part;
            sizes[part] += 1;
            assigned += 1;
            queues[part].extend(adj[v].iter().copied());
        }
    }
    assignment
}

/// One greedy pass; returns the number of moves made. Every move strictly
/// lowers the cut.
fn refine_pass(adj: &[Vec<usize>], assignment: &mut [usize], k: usize, cap: usize) -> usize {
    let mut sizes = vec![0usize; k];
    for &a in assignment.iter() {
        sizes[a] += 1;
    }
    let mut counts = vec![0usize; k];
    let mut moves = 0;
    for v in 0..adj.len() {
        let src = assignment[v];
        if sizes[src] <= 1 {
            continue;
        }
        counts.fill(0);
        for &u in &adj[v] {
            counts[assignment[u]] += 1;
        }
        let internal = counts[src];
        let mut best: Option<usize> = None;
        for dst in 0..k {
            if dst == src || sizes[dst] >= cap {
                continue;
            }
            if best.is_none_or(|b| counts[dst] > counts[b]) {
                best = Some(dst);
            }
        }
        if let Some(dst) = best {
            if counts[dst] > internal {
                assignment[v] = dst;
                sizes[src] -= 1;
                sizes[dst] += 1;
                moves += 1;
            }
        }
    }
    moves
}

/// Reads `node,part` rows. With `expected_k`, part ids must be below it
/// and every part non-empty; without, K is `max id + 1` and ids must be
/// contiguous.
pub fn load_partition(path: &Path, g: &Graph, expected_k: Option<usize>) -> Result<Partition> {
    let file = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            file: file.clone(),
            line: 1,
            message: e.to_string(),
        })?;
    let header = rdr.headers().map_err(|e| Error::Parse {
        file: file.clone(),
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != ["node", "part"] {
        return Err(Error::Parse {
            file,
            line: 1,
            message: "expected header node,part".into(),
        });
    }
    let n = g.num_nodes();
    let mut assignment = vec![usize::MAX; n];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            file: file.clone(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let parse = |s: &str| {
            s.trim().parse::<usize>().map_err(|_| Error::Parse {
                file: file.clone(),
                line,
                message: format!("cannot parse integer from {s:?}"),
            })
        };
        let node = parse(&rec[0])?;
        let part = parse(&rec[1])?;
        if node >= n {
            return Err(Error::Parse {
                file: file.clone(),
                line,
                message: format!("node {node} outside [0, {n})"),
            });
        }
        if assignment[node] != usize::MAX {
            return Err(Error::Parse {
                file: file.clone(),
                line,
                message: format!("node {node} assigned twice"),
            });
        }
        assignment[node] = part;
    }
    if let Some(missing) = assignment.iter().position(|&a| a == usize::MAX) {
        return Err(Error::IncompleteAssignment(missing));
    }
    let k = match expected_k {
        Some(k) => k,
        None => {
            let k = assignment.iter().max().map_or(0, |m| m + 1);
            let mut used = vec![false; k];
            for &a in &assignment {
                used[a] = true;
            }
            if let Some(gap) = used.iter().position(|u| !u) {
                return Err(Error::NonContiguousParts(gap));
            }
            k
        }
    };
    Partition::from_assignment(g, assignment, k)
}
