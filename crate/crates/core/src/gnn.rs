//! Two-layer GCN: forward pass, exact backpropagation and the first-layer
//! embedding used by both attacks.
//!
//! ```text
//! E1     = relu(P X W1 + 1 b1ᵀ)
//! logits = P E1 W2 + 1 b2ᵀ
//! probs  = softmax_rows(logits)
//! ```

use std::path::Path;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{propagation_from_dense, propagation_matrix, Graph, PropagationMode};

/// Default cap on node count for dense propagation.
pub const DEFAULT_MAX_NODES: usize = 5_000;

/// Parameter-shaped tensors: gradients, momentum buffers, control variates.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Gradients {
    pub fn zeros(d_in: usize, hidden: usize, classes: usize) -> Self {
        Gradients {
            w1: Array2::zeros((d_in, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, classes)),
            b2: Array1::zeros(classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.w1.nrows(), self.w1.ncols(), self.w2.ncols())
    }

    pub fn same_shape(&self, other: &Gradients) -> bool {
        self.w1.dim() == other.w1.dim()
            && self.b1.dim() == other.b1.dim()
            && self.w2.dim() == other.w2.dim()
            && self.b2.dim() == other.b2.dim()
    }

    pub fn check_shape(&self, other: &Gradients) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "tensors {:?}/{:?} vs {:?}/{:?}",
                self.w1.dim(),
                self.w2.dim(),
                other.w1.dim(),
                other.w2.dim()
            )))
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Gradients) {
        self.w1.scaled_add(alpha, &other.w1);
        self.b1.scaled_add(alpha, &other.b1);
        self.w2.scaled_add(alpha, &other.w2);
        self.b2.scaled_add(alpha, &other.b2);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.w1 *= alpha;
        self.b1 *= alpha;
        self.w2 *= alpha;
        self.b2 *= alpha;
    }

    /// Elementwise `f(self, other)` into a new value.
    pub fn zip_map(&self, other: &Gradients, f: impl Fn(f64, f64) -> f64 + Copy) -> Gradients {
        Gradients {
            w1: Zip::from(&self.w1).and(&other.w1).map_collect(|&a, &b| f(a, b)),
            b1: Zip::from(&self.b1).and(&other.b1).map_collect(|&a, &b| f(a, b)),
            w2: Zip::from(&self.w2).and(&other.w2).map_collect(|&a, &b| f(a, b)),
            b2: Zip::from(&self.b2).and(&other.b2).map_collect(|&a, &b| f(a, b)),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .copied()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }

    pub fn dist_sq(&self, other: &Gradients) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push_matrix(format!("{prefix}w1"), &self.w1);
        ck.push_vector(format!("{prefix}b1"), &self.b1);
        ck.push_matrix(format!("{prefix}w2"), &self.w2);
        ck.push_vector(format!("{prefix}b2"), &self.b2);
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        Ok(Gradients {
            w1: ck.matrix(&format!("{prefix}w1"))?,
            b1: ck.vector(&format!("{prefix}b1"))?,
            w2: ck.matrix(&format!("{prefix}w2"))?,
            b2: ck.vector(&format!("{prefix}b2"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub weights: Gradients,
    pub mode: PropagationMode,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        d_in: usize,
        hidden: usize,
        classes: usize,
        mode: PropagationMode,
        rng: &mut R,
    ) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
        };
        let w1 = uniform(d_in, hidden);
        let w2 = uniform(hidden, classes);
        ModelParams {
            weights: Gradients {
                w1,
                b1: Array1::zeros(hidden),
                w2,
                b2: Array1::zeros(classes),
            },
            mode,
        }
    }

    pub fn zeros(d_in: usize, hidden: usize, classes: usize, mode: PropagationMode) -> Self {
        ModelParams {
            weights: Gradients::zeros(d_in, hidden, classes),
            mode,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.weights.w1.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.w2.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if w.b1.len() != w.w1.ncols() || w.w2.nrows() != w.w1.ncols() || w.b2.len() != w.w2.ncols() {
            return Err(Error::Shape(format!(
                "inconsistent parameter shapes w1 {:?} b1 {} w2 {:?} b2 {}",
                w.w1.dim(),
                w.b1.len(),
                w.w2.dim(),
                w.b2.len()
            )));
        }
        if !w.is_finite() {
            return Err(Error::InvalidParameter("non-finite model parameter".into()));
        }
        Ok(())
    }

    fn check_graph(&self, g: &Graph) -> Result<()> {
        self.validate()?;
        if g.num_features() != self.input_dim() {
            return Err(Error::Shape(format!(
                "graph has {} features, model expects {}",
                g.num_features(),
                self.input_dim()
            )));
        }
        if g.num_classes() != self.num_classes() {
            return Err(Error::Shape(format!(
                "graph has {} classes, model predicts {}",
                g.num_classes(),
                self.num_classes()
            )));
        }
        if g.num_nodes() > DEFAULT_MAX_NODES {
            return Err(Error::TooLarge {
                nodes: g.num_nodes(),
                cap: DEFAULT_MAX_NODES,
            });
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "kind": "gcn",
            "mode": self.mode.as_str(),
            "hidden": self.hidden(),
        }));
        self.weights.to_checkpoint(&mut ck, "");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mode: PropagationMode = serde_json::from_value(
            ck.meta
                .get("mode")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing mode".into()))?,
        )?;
        let p = ModelParams {
            weights: Gradients::from_checkpoint(ck, "")?,
            mode,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub e1: Array2<f64>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

/// Intermediate values kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub px: Array2<f64>,
    pub pre1: Array2<f64>,
    pub e1: Array2<f64>,
    pub pe1: Array2<f64>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

fn log_softmax_at(row: ndarray::ArrayView1<f64>, c: usize) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    row[c] - lse
}

pub(crate) fn forward_dense(w: &Gradients, prop: &Array2<f64>, x: &Array2<f64>) -> Trace {
    let px = prop.dot(x);
    let pre1 = px.dot(&w.w1) + &w.b1;
    let e1 = pre1.mapv(|v| v.max(0.0));
    let pe1 = prop.dot(&e1);
    let logits = pe1.dot(&w.w2) + &w.b2;
    let probs = softmax_rows(&logits);
    Trace {
        px,
        pre1,
        e1,
        pe1,
        logits,
        probs,
    }
}

/// Backpropagates `d_logits` through both layers.
pub(crate) fn backward_dense(
    w: &Gradients,
    prop: &Array2<f64>,
    trace: &Trace,
    d_logits: &Array2<f64>,
) -> Gradients {
    let gw2 = trace.pe1.t().dot(d_logits);
    let gb2 = d_logits.sum_axis(Axis(0));
    let d_pe1 = d_logits.dot(&w.w2.t());
    let d_e1 = prop.t().dot(&d_pe1);
    let d_pre1 = Zip::from(&d_e1)
        .and(&trace.pre1)
        .map_collect(|&d, &s| if s > 0.0 { d } else { 0.0 });
    let gw1 = trace.px.t().dot(&d_pre1);
    let gb1 = d_pre1.sum_axis(Axis(0));
    Gradients {
        w1: gw1,
        b1: gb1,
        w2: gw2,
        b2: gb2,
    }
}

pub fn forward(p: &ModelParams, g: &Graph) -> Result<ForwardOutput> {
    p.check_graph(g)?;
    let prop = propagation_matrix(g, p.mode);
    let t = forward_dense(&p.weights, &prop, g.features());
    Ok(ForwardOutput {
        e1: t.e1,
        logits: t.logits,
        probs: t.probs,
    })
}

/// `relu(P X W1 + 1 b1ᵀ)` for graph `g`.
pub fn first_layer_embedding(p: &ModelParams, g: &Graph) -> Result<Array2<f64>> {
    p.validate()?;
    if g.num_features() != p.input_dim() {
        return Err(Error::Shape(format!(
            "graph has {} features, model expects {}",
            g.num_features(),
            p.input_dim()
        )));
    }
    if g.num_nodes() > DEFAULT_MAX_NODES {
        return Err(Error::TooLarge {
            nodes: g.num_nodes(),
            cap: DEFAULT_MAX_NODES,
        });
    }
    let prop = propagation_matrix(g, p.mode);
    Ok(embed_dense(p, &prop, g.features()))
}

/// First-layer embedding for a dense adjacency (reconstructed graphs).
pub fn first_layer_embedding_dense(p: &ModelParams, x: &Array2<f64>, adj: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != p.input_dim() || adj.dim() != (x.nrows(), x.nrows()) {
        return Err(Error::Shape(format!(
            "features {:?} / adjacency {:?} vs model input {}",
            x.dim(),
            adj.dim(),
            p.input_dim()
        )));
    }
    let prop = propagation_from_dense(adj, p.mode);
    Ok(embed_dense(p, &prop, x))
}

fn embed_dense(p: &ModelParams, prop: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    (prop.dot(x).dot(&p.weights.w1) + &p.weights.b1).mapv(|v| v.max(0.0))
}

fn masked_count(mask: &[bool]) -> Result<usize> {
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::EmptyMask),
        m => Ok(m),
    }
}

/// Mean cross-entropy over masked nodes and its exact gradient.
pub fn loss_and_grads(p: &ModelParams, g: &Graph, mask: &[bool]) -> Result<(f64, Gradients)> {
    p.check_graph(g)?;
    if mask.len() != g.num_nodes() {
        return Err(Error::Dimension(format!(
            "mask of length {} for {} nodes",
            mask.len(),
            g.num_nodes()
        )));
    }
    let prop = propagation_matrix(g, p.mode);
    loss_and_grads_dense(&p.weights, &prop, g.features(), g.labels(), mask)
}

pub(crate) fn loss_and_grads_dense(
    w: &Gradients,
    prop: &Array2<f64>,
    x: &Array2<f64>,
    labels: &[usize],
    mask: &[bool],
) -> Result<(f64, Gradients)> {
    let m = masked_count(mask)? as f64;
    let t = forward_dense(w, prop, x);
    let mut loss = 0.0;
    let mut d_logits = Array2::zeros(t.probs.dim());
    for (i, (&sel, &y)) in mask.iter().zip(labels).enumerate() {
        if !sel {
            continue;
        }
        loss -= log_softmax_at(t.logits.row(i), y);
        let mut row = d_logits.row_mut(i);
        row.assign(&t.probs.row(i));
        row[y] -= 1.0;
        row /= m;
    }
    let grads = backward_dense(w, prop, &t, &d_logits);
    Ok((loss / m, grads))
}

/// Cross-entropy against soft targets (rows of `targets` are distributions).
pub(crate) fn soft_loss_and_grads_dense(
    w: &Gradients,
    prop: &Array2<f64>,
    x: &Array2<f64>,
    targets: &Array2<f64>,
    mask: &[bool],
) -> Result<(f64, Gradients)> {
    let m = masked_count(mask)? as f64;
    let t = forward_dense(w, prop, x);
    let mut loss = 0.0;
    let mut d_logits = Array2::zeros(t.probs.dim());
    for (i, &sel) in mask.iter().enumerate() {
        if !sel {
            continue;
        }
        for c in 0..targets.ncols() {
            let q = targets[[i, c]];
            if q > 0.0 {
                loss -= q * log_softmax_at(t.logits.row(i), c);
            }
            d_logits[[i, c]] = (t.probs[[i, c]] - q) / m;
        }
    }
    Ok((loss / m, backward_dense(w, prop, &t, &d_logits)))
}

/// Mean cross-entropy only (no gradient).
pub fn loss(p: &ModelParams, g: &Graph, mask: &[bool]) -> Result<f64> {
    p.check_graph(g)?;
    let m = masked_count(mask)? as f64;
    let prop = propagation_matrix(g, p.mode);
    let t = forward_dense(&p.weights, &prop, g.features());
    let total: f64 = mask
        .iter()
        .zip(g.labels())
        .enumerate()
        .filter(|(_, (&sel, _))| sel)
        .map(|(i, (_, &y))| -log_softmax_at(t.logits.row(i), y))
        .sum();
    Ok(total / m)
}

/// Fraction of masked nodes whose argmax prediction equals the label.
pub fn accuracy(p: &ModelParams, g: &Graph, mask: &[bool]) -> Result<f64> {
    let out = forward(p, g)?;
    let m = masked_count(mask)?;
    let correct = out
        .probs
        .outer_iter()
        .zip(g.labels())
        .zip(mask)
        .filter(|(_, &sel)| sel)
        .filter(|((row, &y), _)| argmax(row.iter().copied()) == y)
        .count();
    Ok(correct as f64 / m as f64)
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Largest relative error between the analytic gradient and central
/// differences with step `eps`, over every parameter. The denominator is
/// floored at `1e-6` so exact zeros compare absolutely.
pub fn grad_check(p: &ModelParams, g: &Graph, mask: &[bool], eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let (_, analytic) = loss_and_grads(p, g, mask)?;
    let mut probe = p.clone();
    let mut worst: f64 = 0.0;
    let mut check = |a: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    };
    macro_rules! sweep {
        ($field:ident) => {
            for idx in 0..p.weights.$field.len() {
                let orig = p.weights.$field.as_slice().unwrap()[idx];
                probe.weights.$field.as_slice_mut().unwrap()[idx] = orig + eps;
                let plus = loss(&probe, g, mask)?;
                probe.weights.$field.as_slice_mut().unwrap()[idx] = orig - eps;
                let minus = loss(&probe, g, mask)?;
                probe.weights.$field.as_slice_mut().unwrap()[idx] = orig;
                check(analytic.$field.as_slice().unwrap()[idx], plus, minus);
            }
        };
    }
    sweep!(w1);
    sweep!(b1);
    sweep!(w2);
    sweep!(b2);
    Ok(worst)
}
