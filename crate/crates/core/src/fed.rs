//! Federated training: client local updates, server aggregation with
//! momentum and weight decay, and the strategy variants.
//!
//! Every strategy's aggregated direction goes through the same server step:
//!
//! ```text
//! ΔW = mean_k(upload_k) + λ W
//! M' = μ M + ΔW
//! W' = W − η M'
//! ```

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fsio;
use crate::gnn::{self, Gradients, ModelParams};
use crate::graph::{propagation_matrix, Graph, PropagationMode};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    Scaffold,
    #[serde(rename = "fednova")]
    FedNova,
    FeddfSimplified,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::FedAvg,
        Strategy::FedProx,
        Strategy::Scaffold,
        Strategy::FedNova,
        Strategy::FeddfSimplified,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
            Strategy::Scaffold => "scaffold",
            Strategy::FedNova => "fednova",
            Strategy::FeddfSimplified => "feddf_simplified",
        }
    }
}

/// Local step count: one value for every client or one per client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LocalSteps {
    Uniform(usize),
    PerClient(Vec<usize>),
}

impl Default for LocalSteps {
    fn default() -> Self {
        LocalSteps::Uniform(1)
    }
}

impl LocalSteps {
    pub fn for_client(&self, k: usize) -> usize {
        match self {
            LocalSteps::Uniform(t) => *t,
            LocalSteps::PerClient(v) => v[k],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub strategy: Strategy,
    pub rounds: usize,
    pub local_steps: LocalSteps,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub prox_mu: f64,
    pub seed: u64,
    pub hidden: usize,
    pub mode: PropagationMode,
    /// Server distillation steps per round (feddf_simplified only).
    pub distill_steps: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            strategy: Strategy::FedAvg,
            rounds: 100,
            local_steps: LocalSteps::default(),
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            prox_mu: 0.01,
            seed: 0,
            hidden: 128,
            mode: PropagationMode::default(),
            distill_steps: 1,
        }
    }
}

impl FedConfig {
    /// Experiment-level check: also requires at least one round.
    pub fn validate_experiment(&self, clients: usize) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        self.validate(clients)
    }

    /// Parameter check used by the runner, where zero rounds is a no-op.
    pub fn validate(&self, clients: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.prox_mu >= 0.0) {
            return bad("weight_decay and prox_mu must be >= 0".into());
        }
        if self.hidden == 0 {
            return bad("hidden width must be >= 1".into());
        }
        match &self.local_steps {
            LocalSteps::Uniform(0) => return bad("local_steps must be >= 1".into()),
            LocalSteps::PerClient(v) if v.len() != clients => {
                return bad(format!("{} local step counts for {clients} clients", v.len()))
            }
            LocalSteps::PerClient(v) if v.contains(&0) => return bad("local_steps must be >= 1".into()),
            _ => {}
        }
        Ok(())
    }
}

/// Per-client private state carried between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    /// SCAFFOLD control variate `c_k`.
    pub control: Gradients,
}

/// Server-side buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub momentum: Gradients,
    /// SCAFFOLD global control variate `c`.
    pub control: Gradients,
}

impl ServerState {
    pub fn new(like: &Gradients) -> Self {
        ServerState {
            momentum: like.zeros_like(),
            control: like.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub upload: Gradients,
    pub state: ClientState,
    /// Loss at the received global parameters.
    pub loss: f64,
    pub steps: usize,
}

/// One client's contribution for a round.
pub fn local_update(
    global: &ModelParams,
    g_k: &Graph,
    cfg: &FedConfig,
    steps: usize,
    state: &ClientState,
    server_control: &Gradients,
) -> Result<LocalResult> {
    let mask = g_k.train_mask();
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask);
    }
    let prop = propagation_matrix(g_k, global.mode);
    let mut local = global.weights.clone();
    let mut sum = global.weights.zeros_like();
    let mut raw_sum = global.weights.zeros_like();
    let mut first_loss = f64::NAN;
    for step in 0..steps {
        let (loss, mut g) = gnn::loss_and_grads_dense(&local, &prop, g_k.features(), g_k.labels(), mask)?;
        if step == 0 {
            first_loss = loss;
        }
        match cfg.strategy {
            Strategy::FedProx => {
                let diff = local.zip_map(&global.weights, |a, b| a - b);
                g.axpy(cfg.prox_mu, &diff);
            }
            Strategy::Scaffold => {
                raw_sum.axpy(1.0, &g);
                g = g.zip_map(&state.control, |a, c| a - c);
                g = g.zip_map(server_control, |a, c| a + c);
            }
            _ => {}
        }
        sum.axpy(1.0, &g);
        if step + 1 < steps {
            local.axpy(-cfg.lr, &g);
        }
    }
    sum.scale(1.0 / steps as f64);
    let state = match cfg.strategy {
        Strategy::Scaffold => {
            raw_sum.scale(1.0 / steps as f64);
            ClientState { control: raw_sum }
        }
        _ => state.clone(),
    };
    Ok(LocalResult {
        upload: sum,
        state,
        loss: first_loss,
        steps,
    })
}

/// Server step shared by every strategy.
pub fn aggregate(
    uploads: &[Gradients],
    w: &ModelParams,
    momentum: &Gradients,
    cfg: &FedConfig,
) -> Result<(ModelParams, Gradients)> {
    aggregate_scaled(uploads, 1.0, w, momentum, cfg)
}

fn aggregate_scaled(
    uploads: &[Gradients],
    scale: f64,
    w: &ModelParams,
    momentum: &Gradients,
    cfg: &FedConfig,
) -> Result<(ModelParams, Gradients)> {
    let first = uploads.first().ok_or_else(|| Error::Empty("no uploads to aggregate".into()))?;
    for u in uploads {
        u.check_shape(&w.weights)?;
    }
    first.check_shape(momentum)?;
    let mut delta = w.weights.zeros_like();
    for u in uploads {
        delta.axpy(1.0, u);
    }
    delta.scale(scale / uploads.len() as f64);
    delta.axpy(cfg.weight_decay, &w.weights);
    let mut m = momentum.clone();
    m.scale(cfg.momentum);
    m.axpy(1.0, &delta);
    let mut next = w.clone();
    next.weights.axpy(-cfg.lr, &m);
    Ok((next, m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub uploads: Vec<Gradients>,
    /// Global parameters the uploads were computed against.
    pub snapshot: ModelParams,
    pub selected: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub round: usize,
    pub client: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedRun {
    pub params: ModelParams,
    pub records: Vec<RoundRecord>,
    pub log: Vec<LossRow>,
}

impl FedRun {
    /// Mean client loss per round, in round order.
    pub fn mean_losses(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = vec![(0.0, 0); self.records.len()];
        for row in &self.log {
            out[row.round].0 += row.loss;
            out[row.round].1 += 1;
        }
        out.into_iter().map(|(s, c)| s / c as f64).collect()
    }
}

pub fn rounds_csv(log: &[LossRow]) -> String {
    let mut s = String::from("round,client,loss,grad_norm\n");
    for r in log {
        s.push_str(&format!("{},{},{},{}\n", r.round, r.client, r.loss, r.grad_norm));
    }
    s
}

/// Initial global parameters for a run.
pub fn init_params(d_in: usize, classes: usize, cfg: &FedConfig) -> ModelParams {
    let mut r = rng::stream(cfg.seed, "fed-init", &[]);
    ModelParams::glorot(d_in, cfg.hidden, classes, cfg.mode, &mut r)
}

/// Runs `cfg.rounds` rounds over the client graphs. `transfer` is the
/// public graph used by `feddf_simplified`.
pub fn run_federation(graphs: &[Graph], cfg: &FedConfig, transfer: Option<&Graph>) -> Result<FedRun> {
    let first = graphs.first().ok_or_else(|| Error::Empty("no client graphs".into()))?;
    let init = init_params(first.num_features(), first.num_classes(), cfg);
    run_federation_from(graphs, cfg, transfer, init)
}

pub fn run_federation_from(
    graphs: &[Graph],
    cfg: &FedConfig,
    transfer: Option<&Graph>,
    init: ModelParams,
) -> Result<FedRun> {
    let k = graphs.len();
    if k == 0 {
        return Err(Error::Empty("no client graphs".into()));
    }
    cfg.validate(k)?;
    for g in graphs {
        if g.num_features() != init.input_dim() || g.num_classes() != init.num_classes() {
            return Err(Error::Shape("client graphs disagree with the model shape".into()));
        }
    }
    let transfer = match (cfg.strategy, transfer) {
        (Strategy::FeddfSimplified, None) => {
            return Err(Error::Config("feddf_simplified needs a transfer graph".into()))
        }
        (Strategy::FeddfSimplified, Some(t)) => Some((t, propagation_matrix(t, cfg.mode))),
        _ => None,
    };

    let mut params = init;
    let mut server = ServerState::new(&params.weights);
    let mut clients = vec![
        ClientState {
            control: params.weights.zeros_like()
        };
        k
    ];
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut log = Vec::with_capacity(cfg.rounds * k);

    for round in 0..cfg.rounds {
        let results: Vec<LocalResult> = graphs
            .par_iter()
            .enumerate()
            .map(|(c, g)| local_update(&params, g, cfg, cfg.local_steps.for_client(c), &clients[c], &server.control))
            .collect::<Result<_>>()?;
        for (c, r) in results.iter().enumerate() {
            if !r.loss.is_finite() || !r.upload.is_finite() {
                return Err(Error::NonFinite {
                    epoch: round,
                    detail: format!("client {c} produced a non-finite update"),
                });
            }
            log.push(LossRow {
                round,
                client: c,
                loss: r.loss,
                grad_norm: r.upload.norm_sq().sqrt(),
            });
        }
        let uploads: Vec<Gradients> = results.iter().map(|r| r.upload.clone()).collect();

        let scale = match cfg.strategy {
            Strategy::FedNova => results.iter().map(|r| r.steps as f64).sum::<f64>() / k as f64,
            _ => 1.0,
        };
        let (mut next, m) = aggregate_scaled(&uploads, scale, &params, &server.momentum, cfg)?;

        if cfg.strategy == Strategy::Scaffold {
            let mut dc = params.weights.zeros_like();
            for (old, r) in clients.iter().zip(&results) {
                dc.axpy(1.0, &r.state.control.zip_map(&old.control, |a, b| a - b));
            }
            server.control.axpy(1.0 / k as f64, &dc);
        }
        if let Some((tg, prop)) = &transfer {
            next = distill(&params, &next, &results, tg, prop, cfg)?;
        }

        records.push(RoundRecord {
            round,
            uploads,
            snapshot: params.clone(),
            selected: vec![true; k],
        });
        for (st, r) in clients.iter_mut().zip(results) {
            *st = r.state;
        }
        server.momentum = m;
        params = next;
    }
    Ok(FedRun { params, records, log })
}

/// Server-side distillation: the averaged softmax of the client models
/// `W − η τ_k upload_k` on the transfer graph is the soft target for a few
/// gradient steps of the aggregated model.
fn distill(
    before: &ModelParams,
    after: &ModelParams,
    results: &[LocalResult],
    tg: &Graph,
    prop: &Array2<f64>,
    cfg: &FedConfig,
) -> Result<ModelParams> {
    let n = tg.num_nodes();
    let mut targets = Array2::<f64>::zeros((n, before.num_classes()));
    for r in results {
        let mut wk = before.weights.clone();
        wk.axpy(-cfg.lr * r.steps as f64, &r.upload);
        let t = gnn::forward_dense(&wk, prop, tg.features());
        targets += &t.probs;
    }
    targets /= results.len() as f64;
    let mask = vec![true; n];
    let mut w = after.clone();
    for _ in 0..cfg.distill_steps {
        let (_, g) = gnn::soft_loss_and_grads_dense(&w.weights, prop, tg.features(), &targets, &mask)?;
        w.weights.axpy(-cfg.lr, &g);
    }
    Ok(w)
}

/// Serializes round records into one checkpoint.
pub fn records_to_checkpoint(records: &[RoundRecord]) -> Checkpoint {
    let mode = records.first().map(|r| r.snapshot.mode).unwrap_or_default();
    let mut ck = Checkpoint::new(json!({
        "kind": "round_records",
        "rounds": records.len(),
        "clients": records.first().map_or(0, |r| r.uploads.len()),
        "mode": mode.as_str(),
        "selected": records.iter().map(|r| r.selected.clone()).collect::<Vec<_>>(),
    }));
    for r in records {
        r.snapshot.weights.to_checkpoint(&mut ck, &format!("r{}/global/", r.round));
        for (c, u) in r.uploads.iter().enumerate() {
            u.to_checkpoint(&mut ck, &format!("r{}/c{c}/", r.round));
        }
    }
    ck
}

pub fn records_from_checkpoint(ck: &Checkpoint) -> Result<Vec<RoundRecord>> {
    let field = |k: &str| {
        ck.meta
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("round records missing {k}")))
    };
    let rounds: usize = serde_json::from_value(field("rounds")?)?;
    let clients: usize = serde_json::from_value(field("clients")?)?;
    let mode: PropagationMode = serde_json::from_value(field("mode")?)?;
    let selected: Vec<Vec<bool>> = serde_json::from_value(field("selected")?)?;
    if selected.len() != rounds {
        return Err(Error::Checkpoint("selection flags do not match round count".into()));
    }
    (0..rounds)
        .map(|t| {
            let snapshot = ModelParams {
                weights: Gradients::from_checkpoint(ck, &format!("r{t}/global/"))?,
                mode,
            };
            let uploads = (0..clients)
                .map(|c| Gradients::from_checkpoint(ck, &format!("r{t}/c{c}/")))
                .collect::<Result<_>>()?;
            Ok(RoundRecord {
                round: t,
                uploads,
                snapshot,
                selected: selected[t].clone(),
            })
        })
        .collect()
}

pub fn save_records(records: &[RoundRecord], path: &Path) -> Result<()> {
    records_to_checkpoint(records).save(path)
}

pub fn load_records(path: &Path) -> Result<Vec<RoundRecord>> {
    records_from_checkpoint(&Checkpoint::load(path)?)
}

pub fn save_rounds_csv(log: &[LossRow], path: &Path) -> Result<()> {
    fsio::write_atomic_str(path, &rounds_csv(log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_sbm, SbmParams};
    use crate::partition::partition;

    fn clients(k: usize, seed: u64) -> Vec<Graph> {
        let p = SbmParams::with_random_centers(vec![20, 20], 0.3, 0.02, 6, 1.0, 0.5, seed);
        let g = gen_sbm(&p, seed).unwrap().with_random_split(0.3, 0.2, seed).unwrap();
        partition(&g, k, 0.1, seed).unwrap().subgraphs().to_vec()
    }

    fn cfg(strategy: Strategy, rounds: usize) -> FedConfig {
        FedConfig {
            strategy,
            rounds,
            hidden: 8,
            lr: 0.05,
            ..Default::default()
        }
    }

    fn assert_bits_eq(a: &ModelParams, b: &ModelParams) {
        // == treats -0.0 and +0.0 alike, as the arithmetic does.
        assert!(a.weights.values().zip(b.weights.values()).all(|(x, y)| x == y));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            let v = serde_json::to_value(s).unwrap();
            assert_eq!(v, json!(s.as_str()));
            assert_eq!(serde_json::from_value::<Strategy>(v).unwrap(), s);
        }
    }

    #[test]
    fn plain_sgd_when_single_client_and_no_decay() {
        let cs = clients(1, 1);
        let c = FedConfig { momentum: 0.0, weight_decay: 0.0, ..cfg(Strategy::FedAvg, 1) };
        let w = init_params(6, 2, &c);
        let (_, g) = gnn::loss_and_grads(&w, &cs[0], cs[0].train_mask()).unwrap();
        let (next, m) = aggregate(std::slice::from_ref(&g), &w, &w.weights.zeros_like(), &c).unwrap();
        let mut expect = w.weights.clone();
        expect.axpy(-c.lr, &g);
        assert_eq!(next.weights, expect);
        assert_eq!(m, g);
    }

    #[test]
    fn zero_uploads_decay_momentum_only() {
        let c = FedConfig { weight_decay: 0.0, ..cfg(Strategy::FedAvg, 1) };
        let w = init_params(3, 2, &FedConfig { hidden: 4, ..c.clone() });
        let mut m = w.weights.clone();
        m.scale(0.5);
        let zero = w.weights.zeros_like();
        let (next, m2) = aggregate(&[zero.clone(), zero], &w, &m, &c).unwrap();
        let mut decayed = m.clone();
        decayed.scale(c.momentum);
        assert_eq!(m2, decayed);
        let mut expect = w.weights.clone();
        expect.axpy(-c.lr, &decayed);
        assert_eq!(next.weights, expect);
    }

    #[test]
    fn opposite_uploads_cancel() {
        let c = FedConfig { weight_decay: 0.0, momentum: 0.0, ..cfg(Strategy::FedAvg, 1) };
        let w = init_params(3, 2, &FedConfig { hidden: 4, ..c.clone() });
        let g = w.weights.clone();
        let mut neg = g.clone();
        neg.scale(-1.0);
        let (next, m) = aggregate(&[g, neg], &w, &w.weights.zeros_like(), &c).unwrap();
        assert_eq!(m.norm_sq(), 0.0);
        assert_bits_eq(&next, &w);
    }

    #[test]
    fn server_step_algebra_without_momentum() {
        let cs = clients(2, 3);
        let c = FedConfig { momentum: 0.0, ..cfg(Strategy::FedAvg, 3) };
        let run = run_federation(&cs, &c, None).unwrap();
        for pair in run.records.windows(2) {
            let (w0, w1) = (&pair[0].snapshot.weights, &pair[1].snapshot.weights);
            let mut mean = w0.zeros_like();
            for u in &pair[0].uploads {
                mean.axpy(0.5, u);
            }
            for ((a, b), (g, w)) in w1.values().zip(w0.values()).zip(mean.values().zip(w0.values())) {
                let expect = -c.lr * (g + c.weight_decay * w);
                assert!(((a - b) - expect).abs() <= 1e-15 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn fedprox_with_zero_mu_is_fedavg() {
        let cs = clients(3, 4);
        for steps in [1, 3] {
            let base = FedConfig { local_steps: LocalSteps::Uniform(steps), ..cfg(Strategy::FedAvg, 5) };
            let prox = FedConfig { strategy: Strategy::FedProx, prox_mu: 0.0, ..base.clone() };
            let a = run_federation(&cs, &base, None).unwrap();
            let b = run_federation(&cs, &prox, None).unwrap();
            assert_bits_eq(&a.params, &b.params);
        }
    }

    #[test]
    fn scaffold_first_round_is_fedavg() {
        let cs = clients(3, 5);
        let a = run_federation(&cs, &cfg(Strategy::FedAvg, 1), None).unwrap();
        let b = run_federation(&cs, &cfg(Strategy::Scaffold, 1), None).unwrap();
        assert_bits_eq(&a.params, &b.params);
        for (x, y) in a.records[0].uploads.iter().zip(&b.records[0].uploads) {
            assert!(x.values().zip(y.values()).all(|(p, q)| p == q));
        }
    }

    #[test]
    fn scaffold_diverges_after_first_round_with_local_steps() {
        let cs = clients(3, 5);
        let base = FedConfig { local_steps: LocalSteps::Uniform(3), ..cfg(Strategy::FedAvg, 3) };
        let a = run_federation(&cs, &base, None).unwrap();
        let b = run_federation(&cs, &FedConfig { strategy: Strategy::Scaffold, ..base }, None).unwrap();
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn fednova_with_single_step_is_fedavg() {
        let cs = clients(3, 6);
        let a = run_federation(&cs, &cfg(Strategy::FedAvg, 5), None).unwrap();
        let b = run_federation(&cs, &cfg(Strategy::FedNova, 5), None).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_bits_eq(&ra.snapshot, &rb.snapshot);
        }
        assert_bits_eq(&a.params, &b.params);
    }

    #[test]
    fn fednova_upload_is_normalized_local_direction() {
        let cs = clients(2, 7);
        let c = FedConfig { local_steps: LocalSteps::Uniform(4), ..cfg(Strategy::FedNova, 1) };
        let w = init_params(6, 2, &c);
        let zero = w.weights.zeros_like();
        let st = ClientState { control: zero.clone() };
        let r = local_update(&w, &cs[0], &c, 4, &st, &zero).unwrap();
        // Replay the local trajectory: d = (W_global − W_local_final) / (τ η).
        let prop = propagation_matrix(&cs[0], c.mode);
        let mut local = w.weights.clone();
        for _ in 0..4 {
            let (_, g) =
                gnn::loss_and_grads_dense(&local, &prop, cs[0].features(), cs[0].labels(), cs[0].train_mask()).unwrap();
            local.axpy(-c.lr, &g);
        }
        let d = w.weights.zip_map(&local, |a, b| (a - b) / (4.0 * c.lr));
        for (x, y) in r.upload.values().zip(d.values()) {
            assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn scaffold_control_update_rule() {
        let cs = clients(2, 8);
        let c = FedConfig { local_steps: LocalSteps::Uniform(2), ..cfg(Strategy::Scaffold, 2) };
        let w = init_params(6, 2, &c);
        let zero = w.weights.zeros_like();
        let st = ClientState { control: zero.clone() };
        let r = local_update(&w, &cs[0], &c, 2, &st, &zero).unwrap();
        // Option II: c_k+ = c_k − c + (W − W_local) / (τ η) equals the mean raw gradient.
        let prop = propagation_matrix(&cs[0], c.mode);
        let lg = |p: &Gradients| {
            gnn::loss_and_grads_dense(p, &prop, cs[0].features(), cs[0].labels(), cs[0].train_mask())
                .unwrap()
                .1
        };
        let g0 = lg(&w.weights);
        let mut w1 = w.weights.clone();
        w1.axpy(-c.lr, &g0);
        let g1 = lg(&w1);
        let mut mean = g0.clone();
        mean.axpy(1.0, &g1);
        mean.scale(0.5);
        for (x, y) in r.state.control.values().zip(mean.values()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn zero_rounds_returns_init_and_records_match_rounds() {
        let cs = clients(2, 9);
        let c0 = cfg(Strategy::FedAvg, 0);
        let run0 = run_federation(&cs, &c0, None).unwrap();
        assert_eq!(run0.params, init_params(6, 2, &c0));
        assert!(run0.records.is_empty() && run0.log.is_empty());
        assert!(c0.validate_experiment(2).is_err());
        let run = run_federation(&cs, &cfg(Strategy::FedAvg, 4), None).unwrap();
        assert_eq!(run.records.len(), 4);
        assert!(run.records.iter().all(|r| r.uploads.len() == 2 && r.selected == vec![true; 2]));
        assert_eq!(run.log.len(), 8);
    }

    #[test]
    fn training_lowers_loss() {
        let cs = clients(2, 10);
        let c = FedConfig { hidden: 16, lr: 0.01, ..cfg(Strategy::FedAvg, 100) };
        let run = run_federation(&cs, &c, None).unwrap();
        let losses = run.mean_losses();
        assert!(losses[99] < losses[0], "{} vs {}", losses[99], losses[0]);
    }

    #[test]
    fn deterministic_and_checkpoint_round_trip() {
        let cs = clients(3, 11);
        let c = cfg(Strategy::Scaffold, 3);
        let a = run_federation(&cs, &c, None).unwrap();
        let b = run_federation(&cs, &c, None).unwrap();
        assert_eq!(a.params.to_checkpoint().to_bytes().unwrap(), b.params.to_checkpoint().to_bytes().unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.bin");
        save_records(&a.records, &path).unwrap();
        assert_eq!(load_records(&path).unwrap(), a.records);
        assert_eq!(rounds_csv(&a.log), rounds_csv(&b.log));
    }

    #[test]
    fn feddf_needs_transfer_and_trains() {
        let cs = clients(2, 12);
        let c = FedConfig { lr: 0.01, hidden: 16, ..cfg(Strategy::FeddfSimplified, 60) };
        assert!(run_federation(&cs, &c, None).is_err());
        let p = SbmParams::with_random_centers(vec![10, 10], 0.3, 0.02, 6, 1.0, 0.5, 12);
        let transfer = gen_sbm(&p, 99).unwrap();
        let run = run_federation(&cs, &c, Some(&transfer)).unwrap();
        let l = run.mean_losses();
        assert!(l[59] < l[0]);
    }

    #[test]
    fn config_validation() {
        assert!(FedConfig { momentum: 1.0, ..Default::default() }.validate(1).is_err());
        assert!(FedConfig { lr: 0.0, ..Default::default() }.validate(1).is_err());
        assert!(FedConfig { local_steps: LocalSteps::PerClient(vec![1, 2]), ..Default::default() }
            .validate(3)
            .is_err());
        let parsed: FedConfig = serde_json::from_str(r#"{"strategy":"fednova","local_steps":[1,2]}"#).unwrap();
        assert_eq!(parsed.local_steps, LocalSteps::PerClient(vec![1, 2]));
        assert!(serde_json::from_str::<FedConfig>(r#"{"bogus":1}"#).is_err());
    }
}
