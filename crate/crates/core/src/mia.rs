//! Shadow-model membership inference.
//!
//! The attacker trains its own GCN on a shadow graph with a known member
//! split, trains an MLP to tell member embeddings from non-member ones, and
//! then scores target nodes through the first layer of the global model.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fed::{self, FedConfig};
use crate::fsio;
use crate::gnn::{self, ModelParams};
use crate::graph::{Graph, Masks, PropagationMode};
use crate::rng;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Where the attacker GCN starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackerInit {
    /// The initial global model every participant receives.
    #[default]
    GlobalInit,
    /// Fresh Glorot weights from the attacker seed.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackerConfig {
    pub train_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub init: AttackerInit,
    pub seed: u64,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        AttackerConfig {
            train_fraction: 0.4,
            epochs: 100,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            init: AttackerInit::GlobalInit,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub keep_prob: f64,
    pub batchnorm: bool,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: vec![128, 128],
            keep_prob: 0.5,
            batchnorm: true,
            steps: 500,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::InvalidParameter(format!("keep probability {} outside (0, 1]", self.keep_prob)));
        }
        if !(self.lr > 0.0) || self.hidden.contains(&0) {
            return Err(Error::InvalidParameter("MLP needs lr > 0 and non-empty layers".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttackerGnn {
    pub params: ModelParams,
    /// `true` for shadow nodes in the attacker's training split.
    pub members: Vec<bool>,
    /// Training loss before each epoch's update.
    pub losses: Vec<f64>,
}

/// Splits the shadow graph, then trains the attacker GCN on the member
/// nodes with the same server step the federation uses (one client).
pub fn train_attacker_gnn(
    shadow: &Graph,
    cfg: &AttackerConfig,
    hidden: usize,
    mode: PropagationMode,
    start: Option<&ModelParams>,
) -> Result<AttackerGnn> {
    if shadow.label_histogram().iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::SingleClass("shadow graph has fewer than two classes".into()));
    }
    let n = shadow.num_nodes();
    let m = (cfg.train_fraction * n as f64).ceil() as usize;
    if !(cfg.train_fraction > 0.0) || m == 0 || m >= n {
        return Err(Error::DegenerateSplit(format!(
            "train fraction {} gives {m} members out of {n}",
            cfg.train_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, "shadow-split", &[]));
    let mut members = vec![false; n];
    for &i in &order[..m] {
        members[i] = true;
    }
    let shadow = shadow.with_masks(Masks {
        train: members.clone(),
        val: vec![false; n],
        test: vec![false; n],
    })?;

    let mut params = match start {
        Some(p) => {
            if p.input_dim() != shadow.num_features() || p.num_classes() != shadow.num_classes() || p.hidden() != hidden {
                return Err(Error::Shape("attacker start model does not fit the shadow graph".into()));
            }
            ModelParams { mode, ..p.clone() }
        }
        None => {
            let mut r = rng::stream(cfg.seed, "attacker-init", &[]);
            ModelParams::glorot(shadow.num_features(), hidden, shadow.num_classes(), mode, &mut r)
        }
    };
    let step = FedConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        hidden,
        mode,
        ..FedConfig::default()
    };
    let mut momentum = params.weights.zeros_like();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, g) = gnn::loss_and_grads(&params, &shadow, &members)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                detail: "attacker GCN loss".into(),
            });
        }
        losses.push(loss);
        let (next, m) = fed::aggregate(&[g], &params, &momentum, &step)?;
        params = next;
        momentum = m;
    }
    Ok(AttackerGnn { params, members, losses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackDataset {
    pub embeddings: Array2<f64>,
    pub members: Vec<bool>,
    /// Shadow node id of each row.
    pub nodes: Vec<usize>,
}

pub fn build_attack_dataset(attacker: &AttackerGnn, shadow: &Graph) -> Result<AttackDataset> {
    if attacker.members.len() != shadow.num_nodes() {
        return Err(Error::Dimension("member split does not match the shadow graph".into()));
    }
    Ok(AttackDataset {
        embeddings: gnn::first_layer_embedding(&attacker.params, shadow)?,
        members: attacker.members.clone(),
        nodes: (0..shadow.num_nodes()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub bn: Option<BatchNorm>,
}

/// Hidden layers `linear → batchnorm → relu → dropout` followed by a
/// two-logit softmax head (the last layer).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<MlpLayer>,
    pub keep_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

struct LayerCache {
    input: Array2<f64>,
    xhat: Option<Array2<f64>>,
    inv_std: Option<Array1<f64>>,
    pre_relu: Array2<f64>,
    mask: Option<Array2<f64>>,
}

impl MlpParams {
    pub fn init(input: usize, cfg: &MlpConfig) -> Self {
        let mut r = rng::stream(cfg.seed, "mlp-init", &[]);
        let mut dims = vec![input];
        dims.extend(&cfg.hidden);
        dims.push(2);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, d)| {
                let limit = (6.0 / (d[0] + d[1]) as f64).sqrt();
                MlpLayer {
                    w: Array2::from_shape_fn((d[0], d[1]), |_| r.random_range(-limit..limit)),
                    b: Array1::zeros(d[1]),
                    bn: (cfg.batchnorm && l < last).then(|| BatchNorm {
                        gamma: Array1::ones(d[1]),
                        beta: Array1::zeros(d[1]),
                        running_mean: Array1::zeros(d[1]),
                        running_var: Array1::ones(d[1]),
                    }),
                }
            })
            .collect();
        MlpParams {
            layers,
            keep_prob: cfg.keep_prob,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    /// Class probabilities in inference mode: running statistics, no dropout.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "embedding width {} vs classifier input {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = h.dot(&layer.w) + &layer.b;
            if l == last {
                return Ok(gnn::softmax_rows(&a));
            }
            if let Some(bn) = &layer.bn {
                let inv = bn.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                a = (&(&a - &bn.running_mean) * &inv) * &bn.gamma + &bn.beta;
            }
            h = a.mapv(|v| v.max(0.0));
        }
        unreachable!("the head returns")
    }

    /// Member-class probability per row.
    pub fn member_scores(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.predict(x)?.column(1).to_vec())
    }

    /// Training-mode forward and backward pass with the given dropout masks
    /// (`None` keeps every unit). Returns the mean cross-entropy, the
    /// gradients and each batchnorm layer's batch statistics.
    #[allow(clippy::type_complexity)]
    pub fn loss_and_grads(
        &self,
        x: &Array2<f64>,
        labels: &[bool],
        masks: &[Option<Array2<f64>>],
    ) -> Result<(f64, Vec<LayerGrad>, Vec<Option<(Array1<f64>, Array1<f64>)>>)> {
        let n = x.nrows();
        if labels.len() != n || n == 0 {
            return Err(Error::Dimension(format!("{} labels for {n} rows", labels.len())));
        }
        let last = self.layers.len() - 1;
        let mut caches = Vec::with_capacity(last);
        let mut stats = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, layer) in self.layers[..last].iter().enumerate() {
            let a = h.dot(&layer.w) + &layer.b;
            let (y, xhat, inv_std) = match &layer.bn {
                Some(bn) => {
                    let mean = a.mean_axis(Axis(0)).expect("non-empty batch");
                    let centered = &a - &mean;
                    let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
                    let inv = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                    let xhat = &centered * &inv;
                    let y = &xhat * &bn.gamma + &bn.beta;
                    stats.push(Some((mean, var)));
                    (y, Some(xhat), Some(inv))
                }
                None => {
                    stats.push(None);
                    (a, None, None)
                }
            };
            let mut out = y.mapv(|v| v.max(0.0));
            let mask = masks.get(l).cloned().flatten();
            if let Some(m) = &mask {
                out *= m;
            }
            caches.push(LayerCache {
                input: h,
                xhat,
                inv_std,
                pre_relu: y,
                mask,
            });
            h = out;
        }
        stats.push(None);
        let head = &self.layers[last];
        let probs = gnn::softmax_rows(&(h.dot(&head.w) + &head.b));
        let mut loss = 0.0;
        let mut d = probs.clone();
        for (i, &y) in labels.iter().enumerate() {
            let c = usize::from(y);
            loss -= probs[[i, c]].max(f64::MIN_POSITIVE).ln();
            d[[i, c]] -= 1.0;
        }
        d /= n as f64;

        let mut grads = vec![
            LayerGrad {
                w: Array2::zeros((0, 0)),
                b: Array1::zeros(0),
                gamma: None,
                beta: None,
            };
            self.layers.len()
        ];
        grads[last] = LayerGrad {
            w: h.t().dot(&d),
            b: d.sum_axis(Axis(0)),
            gamma: None,
            beta: None,
        };
        let mut dh = d.dot(&head.w.t());
        for l in (0..last).rev() {
            let c = &caches[l];
            let layer = &self.layers[l];
            if let Some(m) = &c.mask {
                dh *= m;
            }
            let dy = ndarray::Zip::from(&dh)
                .and(&c.pre_relu)
                .map_collect(|&g, &y| if y > 0.0 { g } else { 0.0 });
            let (da, dgamma, dbeta) = match (&layer.bn, &c.xhat, &c.inv_std) {
                (Some(bn), Some(xhat), Some(inv)) => {
                    let dgamma = (&dy * xhat).sum_axis(Axis(0));
                    let dbeta = dy.sum_axis(Axis(0));
                    let dxhat = &dy * &bn.gamma;
                    let nf = n as f64;
                    let s1 = dxhat.sum_axis(Axis(0));
                    let s2 = (&dxhat * xhat).sum_axis(Axis(0));
                    let da = (&(&(&dxhat * nf) - &s1) - &(xhat * &s2)) * &(inv / nf);
                    (da, Some(dgamma), Some(dbeta))
                }
                _ => (dy, None, None),
            };
            grads[l] = LayerGrad {
                w: c.input.t().dot(&da),
                b: da.sum_axis(Axis(0)),
                gamma: dgamma,
                beta: dbeta,
            };
            dh = da.dot(&layer.w.t());
        }
        Ok((loss / n as f64, grads, stats))
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(layer.w.as_slice_mut().expect("standard layout"));
            out.push(layer.b.as_slice_mut().expect("standard layout"));
            if let Some(bn) = &mut layer.bn {
                out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                out.push(bn.beta.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "kind": "mlp",
            "keep_prob": self.keep_prob,
            "layers": self.layers.len(),
            "batchnorm": self.layers.iter().map(|l| l.bn.is_some()).collect::<Vec<_>>(),
        }));
        for (l, layer) in self.layers.iter().enumerate() {
            ck.push_matrix(format!("l{l}/w"), &layer.w);
            ck.push_vector(format!("l{l}/b"), &layer.b);
            if let Some(bn) = &layer.bn {
                ck.push_vector(format!("l{l}/gamma"), &bn.gamma);
                ck.push_vector(format!("l{l}/beta"), &bn.beta);
                ck.push_vector(format!("l{l}/running_mean"), &bn.running_mean);
                ck.push_vector(format!("l{l}/running_var"), &bn.running_var);
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("classifier checkpoint missing {k}")))
        };
        let keep_prob: f64 = serde_json::from_value(meta("keep_prob")?)?;
        let bns: Vec<bool> = serde_json::from_value(meta("batchnorm")?)?;
        let layers = bns
            .iter()
            .enumerate()
            .map(|(l, &has_bn)| {
                Ok(MlpLayer {
                    w: ck.matrix(&format!("l{l}/w"))?,
                    b: ck.vector(&format!("l{l}/b"))?,
                    bn: if has_bn {
                        Some(BatchNorm {
                            gamma: ck.vector(&format!("l{l}/gamma"))?,
                            beta: ck.vector(&format!("l{l}/beta"))?,
                            running_mean: ck.vector(&format!("l{l}/running_mean"))?,
                            running_var: ck.vector(&format!("l{l}/running_var"))?,
                        })
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if layers.is_empty() {
            return Err(Error::Checkpoint("classifier has no layers".into()));
        }
        Ok(MlpParams { layers, keep_prob })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn grad_slices(grads: &[LayerGrad]) -> Vec<&[f64]> {
    let mut out = Vec::new();
    for g in grads {
        out.push(g.w.as_slice().expect("standard layout"));
        out.push(g.b.as_slice().expect("standard layout"));
        if let (Some(ga), Some(be)) = (&g.gamma, &g.beta) {
            out.push(ga.as_slice().expect("standard layout"));
            out.push(be.as_slice().expect("standard layout"));
        }
    }
    out
}

/// Inverted-dropout masks for one training step: kept units are scaled by
/// `1 / keep_prob`.
fn dropout_masks(p: &MlpParams, rows: usize, seed: u64, step: usize) -> Vec<Option<Array2<f64>>> {
    if p.keep_prob >= 1.0 {
        return vec![None; p.layers.len()];
    }
    let mut r = rng::stream(seed, "mlp-dropout", &[step as u64]);
    let scale = 1.0 / p.keep_prob;
    p.layers[..p.layers.len() - 1]
        .iter()
        .map(|l| {
            Some(Array2::from_shape_fn((rows, l.w.ncols()), |_| {
                if r.random::<f64>() < p.keep_prob {
                    scale
                } else {
                    0.0
                }
            }))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainedMlp {
    pub params: MlpParams,
    pub losses: Vec<f64>,
}

/// Full-batch Adam on the member/non-member cross-entropy.
pub fn train_mlp(ds: &AttackDataset, cfg: &MlpConfig) -> Result<TrainedMlp> {
    cfg.validate()?;
    let pos = ds.members.iter().filter(|&&m| m).count();
    if pos == 0 || pos == ds.members.len() {
        return Err(Error::SingleClass("attack dataset needs members and non-members".into()));
    }
    let mut p = MlpParams::init(ds.embeddings.ncols(), cfg);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let sizes: Vec<usize> = p.param_slices_mut().iter().map(|s| s.len()).collect();
    let mut m1: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut m2 = m1.clone();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let masks = dropout_masks(&p, ds.embeddings.nrows(), cfg.seed, step);
        let (loss, grads, stats) = p.loss_and_grads(&ds.embeddings, &ds.members, &masks)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                epoch: step,
                detail: "attack classifier loss".into(),
            });
        }
        losses.push(loss);
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - f64::powi(b1, t), 1.0 - f64::powi(b2, t));
        let gs = grad_slices(&grads);
        for (((param, g), m), v) in p.param_slices_mut().into_iter().zip(gs).zip(&mut m1).zip(&mut m2) {
            for i in 0..param.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                param[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        for (layer, st) in p.layers.iter_mut().zip(stats) {
            if let (Some(bn), Some((mean, var))) = (&mut layer.bn, st) {
                bn.running_mean = &bn.running_mean * (1.0 - BN_MOMENTUM) + &(mean * BN_MOMENTUM);
                bn.running_var = &bn.running_var * (1.0 - BN_MOMENTUM) + &(var * BN_MOMENTUM);
            }
        }
    }
    Ok(TrainedMlp { params: p, losses })
}

/// Member probability of each queried target node, through the global
/// model's first layer.
pub fn infer_membership(clf: &MlpParams, global: &ModelParams, target: &Graph, nodes: &[usize]) -> Result<Vec<f64>> {
    if global.hidden() != clf.input_dim() {
        return Err(Error::Shape(format!(
            "global hidden width {} vs classifier input {}",
            global.hidden(),
            clf.input_dim()
        )));
    }
    if let Some(&bad) = nodes.iter().find(|&&i| i >= target.num_nodes()) {
        return Err(Error::Dimension(format!("node {bad} outside the target graph")));
    }
    let e = gnn::first_layer_embedding(global, target)?;
    clf.member_scores(&e.select(Axis(0), nodes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub node: usize,
    pub score: f64,
    pub true_member: bool,
}

pub fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut s = String::from("node,score,true_member\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.node, r.score, u8::from(r.true_member)));
    }
    s
}

pub fn save_scores_csv(rows: &[ScoreRow], path: &Path) -> Result<()> {
    fsio::write_atomic_str(path, &scores_csv(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_sbm, SbmParams};
    use crate::metrics::{auc, ScoredLabels};

    fn shadow(seed: u64) -> Graph {
        let p = SbmParams::with_random_centers(vec![30, 30], 0.2, 0.02, 8, 1.0, 1.0, seed);
        gen_sbm(&p, seed).unwrap()
    }

    fn toy(n: usize, seed: u64) -> AttackDataset {
        let mut r = rng::stream(seed, "toy", &[]);
        let members: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let embeddings = Array2::from_shape_fn((n, 2), |(i, j)| {
            let shift = if members[i] { 1.0 } else { -1.0 };
            shift * if j == 0 { 1.0 } else { 0.5 } + r.random_range(-0.4..0.4)
        });
        AttackDataset {
            embeddings,
            members,
            nodes: (0..n).collect(),
        }
    }

    #[test]
    fn attacker_zero_epochs_is_init_and_deterministic() {
        let s = shadow(1);
        let cfg = AttackerConfig { epochs: 0, ..Default::default() };
        let a = train_attacker_gnn(&s, &cfg, 8, PropagationMode::default(), None).unwrap();
        let mut r = rng::stream(cfg.seed, "attacker-init", &[]);
        assert_eq!(a.params, ModelParams::glorot(8, 8, 2, PropagationMode::default(), &mut r));
        assert_eq!(a.members.iter().filter(|&&m| m).count(), 24);
        let cfg = AttackerConfig { epochs: 100, lr: 0.01, ..Default::default() };
        let x = train_attacker_gnn(&s, &cfg, 8, PropagationMode::default(), None).unwrap();
        let y = train_attacker_gnn(&s, &cfg, 8, PropagationMode::default(), None).unwrap();
        assert_eq!(x.params, y.params);
        assert!(x.losses[99] < x.losses[0]);
    }

    #[test]
    fn attacker_rejects_degenerate_inputs() {
        let s = shadow(2);
        let one = AttackerConfig { train_fraction: 1.0, ..Default::default() };
        assert!(matches!(
            train_attacker_gnn(&s, &one, 4, PropagationMode::default(), None),
            Err(Error::DegenerateSplit(_))
        ));
        let p = SbmParams::with_random_centers(vec![10], 0.5, 0.0, 3, 1.0, 1.0, 0);
        let single = gen_sbm(&p, 0).unwrap();
        assert!(train_attacker_gnn(&single, &AttackerConfig::default(), 4, PropagationMode::default(), None).is_err());
    }

    #[test]
    fn dataset_rows_are_first_layer_embeddings() {
        let s = shadow(3);
        let a = train_attacker_gnn(&s, &AttackerConfig { epochs: 5, ..Default::default() }, 8, PropagationMode::default(), None)
            .unwrap();
        let ds = build_attack_dataset(&a, &s).unwrap();
        assert_eq!(ds.embeddings.nrows(), 60);
        assert_eq!(ds.embeddings, gnn::forward(&a.params, &s).unwrap().e1);
        assert_eq!(ds.members.iter().filter(|&&m| m).count(), 24);
    }

    #[test]
    fn separable_toy_is_learned() {
        let ds = toy(200, 0);
        let cfg = MlpConfig { steps: 500, lr: 1e-2, ..Default::default() };
        let clf = train_mlp(&ds, &cfg).unwrap();
        let probs = clf.params.predict(&ds.embeddings).unwrap();
        let correct = probs
            .outer_iter()
            .zip(&ds.members)
            .filter(|(p, &m)| (p[1] > 0.5) == m)
            .count();
        assert!(correct as f64 / 200.0 >= 0.99, "{correct}");
    }

    /// Central differences on every parameter of a deterministic network.
    fn fd_error(cfg: &MlpConfig) -> f64 {
        let ds = toy(12, 4);
        let p = MlpParams::init(2, cfg);
        let none = vec![None; p.layers.len()];
        let (_, grads, _) = p.loss_and_grads(&ds.embeddings, &ds.members, &none).unwrap();
        let flat: Vec<f64> = grad_slices(&grads).concat();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        let count = flat.len();
        for k in 0..count {
            let bump = |delta: f64| {
                let mut q = p.clone();
                let mut seen = 0;
                for s in q.param_slices_mut() {
                    if k < seen + s.len() {
                        s[k - seen] += delta;
                        break;
                    }
                    seen += s.len();
                }
                q.loss_and_grads(&ds.embeddings, &ds.members, &none).unwrap().0
            };
            let num = (bump(eps) - bump(-eps)) / (2.0 * eps);
            let err = (num - flat[k]).abs() / num.abs().max(flat[k].abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn logistic_case_matches_finite_differences() {
        let cfg = MlpConfig { hidden: vec![], keep_prob: 1.0, batchnorm: false, ..Default::default() };
        assert!(fd_error(&cfg) < 1e-4);
    }

    #[test]
    fn batchnorm_network_matches_finite_differences() {
        let cfg = MlpConfig { hidden: vec![5, 4], keep_prob: 1.0, batchnorm: true, ..Default::default() };
        assert!(fd_error(&cfg) < 1e-4);
    }

    #[test]
    fn flipped_labels_complement_auc() {
        let ds = toy(40, 5);
        let clf = train_mlp(&ds, &MlpConfig { steps: 20, ..Default::default() }).unwrap();
        let s = clf.params.member_scores(&ds.embeddings).unwrap();
        let flipped: Vec<bool> = ds.members.iter().map(|m| !m).collect();
        let a = auc(&ScoredLabels::new(s.clone(), ds.members.clone()).unwrap()).unwrap();
        let b = auc(&ScoredLabels::new(s, flipped).unwrap()).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_dataset_is_rejected() {
        let mut ds = toy(10, 6);
        ds.members = vec![true; 10];
        assert!(matches!(train_mlp(&ds, &MlpConfig::default()), Err(Error::SingleClass(_))));
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let cfg = MlpConfig { hidden: vec![6], keep_prob: 0.5, batchnorm: false, ..Default::default() };
        let p = MlpParams::init(3, &cfg);
        let x = Array2::from_shape_fn((1, 3), |(_, j)| 0.5 + j as f64);
        let hidden = (x.dot(&p.layers[0].w) + &p.layers[0].b).mapv(|v| v.max(0.0));
        let head = &p.layers[1];
        let inference = hidden.dot(&head.w);
        let mut acc = Array2::zeros(inference.dim());
        let draws = 10_000;
        for s in 0..draws {
            let m = dropout_masks(&p, 1, 42, s)[0].clone().unwrap();
            acc += &(&hidden * &m).dot(&head.w);
        }
        acc /= draws as f64;
        for (a, b) in acc.iter().zip(&inference) {
            assert!((a - b).abs() <= 0.02 * b.abs().max(0.1), "{a} vs {b}");
        }
    }

    #[test]
    fn outputs_are_distributions_and_scores_are_stable() {
        let ds = toy(30, 7);
        let clf = train_mlp(&ds, &MlpConfig { steps: 10, ..Default::default() }).unwrap();
        let probs = clf.params.predict(&ds.embeddings).unwrap();
        assert!(probs.outer_iter().all(|r| (r.sum() - 1.0).abs() < 1e-9));
        let s = shadow(7);
        let mut r = rng::stream(0, "g", &[]);
        let global = ModelParams::glorot(8, 2, 2, PropagationMode::default(), &mut r);
        let small = MlpParams::init(2, &MlpConfig { hidden: vec![4], ..Default::default() });
        let a = infer_membership(&small, &global, &s, &[3, 3, 10]).unwrap();
        assert_eq!(a[0], a[1]);
        let b = infer_membership(&small, &global, &s, &[10, 3]).unwrap();
        assert_eq!(a[2], b[0]);
        assert_eq!(a[0], b[1]);
        let wide = ModelParams::glorot(8, 5, 2, PropagationMode::default(), &mut r);
        assert!(infer_membership(&small, &wide, &s, &[0]).is_err());
    }

    #[test]
    fn untrained_classifier_is_at_chance() {
        let p = SbmParams::with_random_centers(vec![250, 250], 0.02, 0.002, 8, 1.0, 1.0, 11);
        let target = gen_sbm(&p, 11).unwrap();
        let mut total = 0.0;
        for seed in 0..10 {
            let mut r = rng::stream(seed, "null-global", &[]);
            let global = ModelParams::glorot(8, 16, 2, PropagationMode::default(), &mut r);
            let clf = MlpParams::init(16, &MlpConfig { hidden: vec![16], seed, ..Default::default() });
            let nodes: Vec<usize> = (0..500).collect();
            let scores = infer_membership(&clf, &global, &target, &nodes).unwrap();
            let mut order = nodes.clone();
            order.shuffle(&mut rng::stream(seed, "null-members", &[]));
            let mut member = vec![false; 500];
            for &i in &order[..250] {
                member[i] = true;
            }
            total += auc(&ScoredLabels::new(scores, member).unwrap()).unwrap();
        }
        let mean = total / 10.0;
        assert!((0.4..=0.6).contains(&mean), "{mean}");
    }

    #[test]
    fn classifier_checkpoint_round_trip() {
        let ds = toy(20, 8);
        let clf = train_mlp(&ds, &MlpConfig { steps: 5, hidden: vec![4, 3], ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.bin");
        clf.params.save(&path).unwrap();
        assert_eq!(MlpParams::load(&path).unwrap(), clf.params);
    }
}
