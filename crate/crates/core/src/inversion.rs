//! Gradient inversion: recover a client's node features and adjacency from
//! its intercepted first-layer gradient.
//!
//! The objective is
//!
//! ```text
//! L = (1 - cos(g, ĝ)) + alpha * tr(Xᵀ L̂ X) + beta * ‖A‖_F²
//! ```
//!
//! where `ĝ = ∂CE/∂W1` evaluated on the dummy `(X, A)`. Its derivative with
//! respect to `X` and `A` is taken by writing the analytic backward pass of
//! the GCN as taped operations. The relu mask is held constant, which is
//! exact wherever the pre-activation is nonzero.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fsio;
use crate::gnn::{self, ModelParams};
use crate::graph::{self, propagation_from_dense, Graph, Masks, PropagationMode, DEGREE_EPS};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub lr_x: f64,
    pub lr_a: f64,
    /// Known edge density: edges per node.
    pub rho: f64,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            alpha: 1e-3,
            beta: 1e-4,
            epochs: 300,
            lr_x: 0.1,
            lr_a: 0.1,
            rho: 1.0,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad(format!("alpha {} and beta {} must be >= 0", self.alpha, self.beta));
        }
        if !(self.lr_x > 0.0 && self.lr_a > 0.0) {
            return bad(format!("step sizes must be positive ({}, {})", self.lr_x, self.lr_a));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad(format!("edge density {} must be finite and >= 0", self.rho));
        }
        Ok(())
    }
}

/// Individual terms of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub cos: f64,
    pub smooth: f64,
    pub frob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub x_hat: Array2<f64>,
    pub a_cont: Array2<f64>,
    pub a_hat: Array2<f64>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    /// Objective before the first step and after every step.
    pub trace: Vec<LossTerms>,
}

impl Reconstruction {
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.a_hat.nrows();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.a_hat[[i, j]] != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// The reconstruction as a graph with binary adjacency; the loss mask
    /// becomes the train mask.
    pub fn to_graph(&self, num_classes: usize) -> Result<Graph> {
        let n = self.labels.len();
        let masks = Masks {
            train: self.mask.clone(),
            val: vec![false; n],
            test: vec![false; n],
        };
        Graph::new(self.x_hat.clone(), self.edges(), self.labels.clone(), num_classes, masks)
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from("epoch,total,cos,smooth,frob\n");
        for (e, t) in self.trace.iter().enumerate() {
            s.push_str(&format!("{e},{},{},{},{}\n", t.total, t.cos, t.smooth, t.frob));
        }
        s
    }

    /// Writes the bundle plus `loss_trace.csv` into `dir`.
    pub fn save(&self, dir: &Path, num_classes: usize) -> Result<()> {
        graph::save_bundle(&self.to_graph(num_classes)?, dir)?;
        fsio::write_atomic_str(&dir.join("loss_trace.csv"), &self.trace_csv())
    }
}

fn flat_dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 - <g, ĝ> / (‖g‖ ‖ĝ‖)`; defined as 1 when `ĝ` is zero.
pub fn cosine_grad_loss(g_true: &Array2<f64>, g_syn: &Array2<f64>) -> Result<f64> {
    if g_true.dim() != g_syn.dim() {
        return Err(Error::Shape(format!("gradient {:?} vs {:?}", g_true.dim(), g_syn.dim())));
    }
    let nt = flat_dot(g_true, g_true).sqrt();
    if nt == 0.0 {
        return Err(Error::InvalidParameter("true gradient has zero norm".into()));
    }
    let ns = flat_dot(g_syn, g_syn).sqrt();
    if ns == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - flat_dot(g_true, g_syn) / (nt * ns))
}

/// `tr(Xᵀ L̂ X)` with `L̂` the normalized Laplacian of `A`.
pub fn smoothness(x: &Array2<f64>, a: &Array2<f64>) -> Result<f64> {
    if a.dim() != (x.nrows(), x.nrows()) {
        return Err(Error::Shape(format!("features {:?} vs adjacency {:?}", x.dim(), a.dim())));
    }
    let lap = propagation_from_dense(a, PropagationMode::NormalizedLaplacian);
    Ok(flat_dot(x, &lap.dot(x)))
}

fn check_inputs(
    global: &ModelParams,
    g_true: &Array2<f64>,
    x: &Array2<f64>,
    a: &Array2<f64>,
    labels: &[usize],
    mask: &[bool],
) -> Result<()> {
    global.validate()?;
    let n = x.nrows();
    if g_true.dim() != global.weights.w1.dim() {
        return Err(Error::Shape(format!(
            "intercepted gradient {:?} vs W1 {:?}",
            g_true.dim(),
            global.weights.w1.dim()
        )));
    }
    if x.ncols() != global.input_dim() || a.dim() != (n, n) || labels.len() != n || mask.len() != n {
        return Err(Error::Shape(format!(
            "features {:?}, adjacency {:?}, {} labels, {} mask entries",
            x.dim(),
            a.dim(),
            labels.len(),
            mask.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= global.num_classes()) {
        return Err(Error::InvalidParameter(format!("label {y} out of range")));
    }
    Ok(())
}

/// Objective value computed with the GCN engine (no tape).
pub fn total_loss(
    global: &ModelParams,
    g_true: &Array2<f64>,
    x_hat: &Array2<f64>,
    a_cont: &Array2<f64>,
    labels: &[usize],
    mask: &[bool],
    cfg: &InversionConfig,
) -> Result<LossTerms> {
    check_inputs(global, g_true, x_hat, a_cont, labels, mask)?;
    let prop = propagation_from_dense(a_cont, global.mode);
    let (_, g_syn) = gnn::loss_and_grads_dense(&global.weights, &prop, x_hat, labels, mask)?;
    let cos = cosine_grad_loss(g_true, &g_syn.w1)?;
    let smooth = smoothness(x_hat, a_cont)?;
    let frob = a_cont.iter().map(|v| v * v).sum::<f64>();
    Ok(LossTerms {
        total: cos + cfg.alpha * smooth + cfg.beta * frob,
        cos,
        smooth,
        frob,
    })
}

/// Objective and its gradient with respect to `X̂` and the symmetric `Â`.
/// The adjacency gradient holds `∂L/∂a_ij` for the shared entry
/// `a_ij = a_ji` in both mirrored positions, with a zero diagonal.
pub fn loss_and_grad(
    global: &ModelParams,
    g_true: &Array2<f64>,
    x_hat: &Array2<f64>,
    a_cont: &Array2<f64>,
    labels: &[usize],
    mask: &[bool],
    cfg: &InversionConfig,
) -> Result<(LossTerms, Array2<f64>, Array2<f64>)> {
    check_inputs(global, g_true, x_hat, a_cont, labels, mask)?;
    let n = x_hat.nrows();
    let w = &global.weights;
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return Err(Error::EmptyMask);
    }

    let mut t = Tape::new();
    let x = t.leaf(x_hat.clone());
    let a = t.leaf(a_cont.clone());
    let deg = t.row_sum(a);

    let prop = match global.mode {
        PropagationMode::SymNormAdjSelfLoops => {
            let eye = t.constant(Array2::eye(n));
            let at = t.add(a, eye);
            let d = t.add_scalar(deg, 1.0);
            let s = t.powf(d, -0.5);
            sym_scale(&mut t, at, s)
        }
        PropagationMode::NormalizedLaplacian => {
            let s = lap_scale(&mut t, deg);
            let s2 = t.mul(s, s);
            let dd = t.mul(deg, s2);
            let diag = t.diag_from_col(dd);
            let off = sym_scale(&mut t, a, s);
            t.sub(diag, off)
        }
    };

    let w1 = t.constant(w.w1.clone());
    let b1 = t.constant(w.b1.clone().insert_axis(ndarray::Axis(0)));
    let w2 = t.constant(w.w2.clone());
    let b2 = t.constant(w.b2.clone().insert_axis(ndarray::Axis(0)));
    let w2t = t.constant(w.w2.t().to_owned());

    let px = t.matmul(prop, x);
    let xw = t.matmul(px, w1);
    let pre1 = t.add_row(xw, b1);
    let relu = t.constant(t.value(pre1).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
    let e1 = t.mul(pre1, relu);
    let pe1 = t.matmul(prop, e1);
    let hw = t.matmul(pe1, w2);
    let logits = t.add_row(hw, b2);
    let probs = t.softmax_rows(logits);

    let c = global.num_classes();
    let mut onehot = Array2::zeros((n, c));
    let mut weight = Array2::zeros((n, c));
    for i in (0..n).filter(|&i| mask[i]) {
        onehot[[i, labels[i]]] = 1.0;
        weight.row_mut(i).fill(1.0 / m as f64);
    }
    let onehot = t.constant(onehot);
    let weight = t.constant(weight);
    let diff = t.sub(probs, onehot);
    let d_logits = t.mul(diff, weight);
    let d_pe1 = t.matmul(d_logits, w2t);
    let prop_t = t.transpose(prop);
    let d_e1 = t.matmul(prop_t, d_pe1);
    let d_pre1 = t.mul(d_e1, relu);
    let px_t = t.transpose(px);
    let g_syn = t.matmul(px_t, d_pre1);

    let gt_norm = flat_dot(g_true, g_true).sqrt();
    if gt_norm == 0.0 {
        return Err(Error::InvalidParameter("true gradient has zero norm".into()));
    }
    let syn_norm = flat_dot(t.value(g_syn), t.value(g_syn)).sqrt();
    // Unit target keeps tiny uploads from overflowing the quotient's gradient.
    let gt = t.constant(g_true / gt_norm);

    let prod = t.mul(gt, g_syn);
    let inner = t.sum(prod);
    let sq = t.mul(g_syn, g_syn);
    let sq_sum = t.sum(sq);
    let norm = t.sqrt(sq_sum);
    let ratio = t.div(inner, norm);
    let neg = t.scale(ratio, -1.0);
    let cos_term = t.add_scalar(neg, 1.0);

    let s = lap_scale(&mut t, deg);
    let y = t.mul_col(x, s);
    let yy = t.mul(y, y);
    let dyy = t.mul_col(yy, deg);
    let self_term = t.sum(dyy);
    let y_t = t.transpose(y);
    let gram = t.matmul(y, y_t);
    let ag = t.mul(a, gram);
    let cross = t.sum(ag);
    let smooth = t.sub(self_term, cross);

    let aa = t.mul(a, a);
    let frob = t.sum(aa);

    let root = if syn_norm == 0.0 {
        // ĝ = 0: the cosine term is the constant 1.
        let one = t.constant(Array2::ones((1, 1)));
        let sm = t.scale(smooth, cfg.alpha);
        let fr = t.scale(frob, cfg.beta);
        let r = t.add(one, sm);
        t.add(r, fr)
    } else {
        let sm = t.scale(smooth, cfg.alpha);
        let fr = t.scale(frob, cfg.beta);
        let r = t.add(cos_term, sm);
        t.add(r, fr)
    };

    let terms = LossTerms {
        total: t.scalar(root),
        cos: if syn_norm == 0.0 { 1.0 } else { t.scalar(cos_term) },
        smooth: t.scalar(smooth),
        frob: t.scalar(frob),
    };
    let mut grads = t.backward(root);
    let gx = grads.take(x).unwrap_or_else(|| Array2::zeros(x_hat.dim()));
    let ga = grads.take(a).unwrap_or_else(|| Array2::zeros((n, n)));
    let mut ga_sym = &ga + &ga.t();
    for i in 0..n {
        ga_sym[[i, i]] = 0.0;
    }
    Ok((terms, gx, ga_sym))
}

/// `diag(s) M diag(s)` on the tape.
fn sym_scale(t: &mut Tape, m: Var, s: Var) -> Var {
    let left = t.mul_col(m, s);
    let left_t = t.transpose(left);
    t.mul_col(left_t, s)
}

/// `(d + ε[d = 0])^{-1/2}`, the guarded inverse square root of degrees.
fn lap_scale(t: &mut Tape, deg: Var) -> Var {
    let guard = t.value(deg).mapv(|d| if d > 0.0 { 0.0 } else { DEGREE_EPS });
    let guard = t.constant(guard);
    let d = t.add(deg, guard);
    t.powf(d, -0.5)
}

/// Entrywise clamp to `[0, 1]`.
pub fn project_unit(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// Number of edges retained for `n` nodes at density `rho`.
pub fn edge_budget(rho: f64, n: usize) -> usize {
    let cap = n * n.saturating_sub(1) / 2;
    ((rho * n as f64).floor() as usize).min(cap)
}

/// Keeps the `n_e` largest upper-triangle weights (ties: lowest `(i, j)`)
/// and returns the symmetric 0/1 adjacency.
pub fn sample_top_edges(a_cont: &Array2<f64>, n_e: usize) -> Array2<f64> {
    let n = a_cont.nrows();
    let mut cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    cells.sort_by(|&(i, j), &(k, l)| {
        a_cont[[k, l]]
            .total_cmp(&a_cont[[i, j]])
            .then((i, j).cmp(&(k, l)))
    });
    let mut out = Array2::zeros((n, n));
    for &(i, j) in cells.iter().take(n_e) {
        out[[i, j]] = 1.0;
        out[[j, i]] = 1.0;
    }
    out
}

/// Random starting point: `X ~ N(0, 0.1²)`, `A ~ U(0,1)` symmetric with a
/// zero diagonal.
pub fn init_dummy(n: usize, d: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut r = rng::stream(seed, "inversion-init", &[]);
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let x = Array2::from_shape_fn((n, d), |_| normal.sample(&mut r));
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = r.random();
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
    (x, a)
}

/// Projected gradient descent on the dummy inputs, then top-edge sampling.
pub fn invert(
    global: &ModelParams,
    g_true: &Array2<f64>,
    labels: &[usize],
    mask: &[bool],
    cfg: &InversionConfig,
) -> Result<Reconstruction> {
    cfg.validate()?;
    let n = labels.len();
    let (mut x, mut a) = init_dummy(n, global.input_dim(), cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (terms, gx, ga) = loss_and_grad(global, g_true, &x, &a, labels, mask, cfg)?;
        if !terms.total.is_finite() || !gx.iter().chain(ga.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                epoch,
                detail: format!(
                    "cos {} smooth {} frob {}; |X| max {:e}",
                    terms.cos,
                    terms.smooth,
                    terms.frob,
                    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
                ),
            });
        }
        trace.push(terms);
        if epoch == cfg.epochs {
            break;
        }
        x.scaled_add(-cfg.lr_x, &gx);
        a.scaled_add(-cfg.lr_a, &ga);
        project_unit(&mut a);
    }
    let a_hat = sample_top_edges(&a, edge_budget(cfg.rho, n));
    Ok(Reconstruction {
        x_hat: x,
        a_cont: a,
        a_hat,
        labels: labels.to_vec(),
        mask: mask.to_vec(),
        trace,
    })
}

/// Edges per node of `g`, the density an attacker is assumed to know.
pub fn edge_density(g: &Graph) -> f64 {
    if g.num_nodes() == 0 {
        0.0
    } else {
        g.num_edges() as f64 / g.num_nodes() as f64
    }
}
