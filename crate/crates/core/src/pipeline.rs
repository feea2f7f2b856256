//! Experiment configuration and the end-to-end stages: data, partition,
//! federation, membership attack, inversion, ownership attack and the
//! defense sweep.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::defense::{self, DefenseConfig};
use crate::error::{Error, Result};
use crate::fed::{self, FedConfig, FedRun, RoundRecord};
use crate::gnn::{self, ModelParams};
use crate::graph::{self, Graph, SbmParams};
use crate::inversion::{self, InversionConfig, Reconstruction};
use crate::metrics::{self, ScoredLabels};
use crate::mia::{self, AttackerConfig, AttackerInit, MlpConfig, MlpParams, ScoreRow};
use crate::partition::{self, Partition};
use crate::proto::{self, Assignment, PrototypeSet};
use crate::rng;
use crate::tap::{self, TapConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Bundle {
        path: PathBuf,
    },
    Sbm {
        params: SbmParams,
    },
    /// SBM whose block centers are `center_scale · N(0, I)` draws from
    /// `centers_seed`.
    SbmRandom {
        blocks: Vec<usize>,
        p_in: f64,
        p_out: f64,
        num_features: usize,
        center_scale: f64,
        feature_noise: f64,
        centers_seed: u64,
    },
}

impl DatasetSource {
    pub fn sbm_params(&self) -> Option<SbmParams> {
        match self {
            DatasetSource::Bundle { .. } => None,
            DatasetSource::Sbm { params } => Some(params.clone()),
            DatasetSource::SbmRandom {
                blocks,
                p_in,
                p_out,
                num_features,
                center_scale,
                feature_noise,
                centers_seed,
            } => Some(SbmParams::with_random_centers(
                blocks.clone(),
                *p_in,
                *p_out,
                *num_features,
                *center_scale,
                *feature_noise,
                *centers_seed,
            )),
        }
    }

    /// Loads or generates the graph; generated graphs use `seed`.
    pub fn load(&self, seed: u64) -> Result<Graph> {
        match (self, self.sbm_params()) {
            (DatasetSource::Bundle { path }, _) => graph::load_bundle(path),
            (_, Some(p)) => graph::gen_sbm(&p, seed),
            (_, None) => unreachable!("non-bundle sources are SBMs"),
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            DatasetSource::Bundle { path } if !path.join("meta.json").exists() => {
                Err(Error::MissingFile(path.join("meta.json")))
            }
            DatasetSource::Bundle { .. } => Ok(()),
            _ => self.sbm_params().expect("sbm").validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Keep the masks stored in a bundle instead of drawing a new split.
    pub keep_bundle_masks: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.4,
            val_fraction: 0.0,
            keep_bundle_masks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MembershipAttackConfig {
    /// Shadow graph; `None` draws another graph from the target's SBM.
    pub shadow: Option<DatasetSource>,
    pub attacker: AttackerConfig,
    pub mlp: MlpConfig,
}

/// Which intercepted upload of a client is inverted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceRound {
    First,
    #[default]
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OwnershipAttackConfig {
    pub inversion: InversionConfig,
    pub source_round: SourceRound,
    /// Use each client's true edges per node as the edge budget.
    pub rho_from_client: bool,
    pub kl_bins: usize,
    pub kl_eps: f64,
}

impl Default for OwnershipAttackConfig {
    fn default() -> Self {
        OwnershipAttackConfig {
            inversion: InversionConfig::default(),
            source_round: SourceRound::Last,
            rho_from_client: true,
            kl_bins: 10,
            kl_eps: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub split: SplitConfig,
    pub clients: usize,
    pub balance_tol: f64,
    pub fed: FedConfig,
    pub tap: TapConfig,
    pub membership: MembershipAttackConfig,
    pub ownership: OwnershipAttackConfig,
    pub defense: Option<DefenseConfig>,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::SbmRandom {
                blocks: vec![50, 50],
                p_in: 0.1,
                p_out: 0.01,
                num_features: 16,
                center_scale: 1.0,
                feature_noise: 1.0,
                centers_seed: 0,
            },
            split: SplitConfig::default(),
            clients: 3,
            balance_tol: 0.1,
            fed: FedConfig::default(),
            tap: TapConfig::default(),
            membership: MembershipAttackConfig::default(),
            ownership: OwnershipAttackConfig::default(),
            defense: None,
            output_dir: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::fsio::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.check()?;
        if let Some(s) = &self.membership.shadow {
            s.check()?;
        }
        if self.clients == 0 {
            return Err(Error::Config("at least one client".into()));
        }
        if !(0.0..1.0).contains(&self.split.train_fraction)
            || self.split.val_fraction < 0.0
            || self.split.train_fraction + self.split.val_fraction > 1.0
        {
            return Err(Error::Config("split fractions must lie in [0, 1] and sum to at most 1".into()));
        }
        self.fed.validate_experiment(self.clients)?;
        self.tap.validate()?;
        self.membership.mlp.validate()?;
        self.ownership.inversion.validate()?;
        if self.ownership.kl_bins == 0 || !(self.ownership.kl_eps > 0.0) {
            return Err(Error::Config("kl_bins and kl_eps must be positive".into()));
        }
        if self.membership.mlp.hidden.is_empty() {
            return Err(Error::Config("the attack MLP needs a hidden layer".into()));
        }
        if let Some(d) = &self.defense {
            d.validate()?;
        }
        Ok(())
    }

    /// Seeds every stage from the master seed; per-stage `seed` fields
    /// in the document are overwritten.
    pub fn resolved(&self) -> Self {
        let s = |label: &str| rng::derive_seed(self.seed, label, &[]);
        let mut c = self.clone();
        c.fed.seed = s("fed");
        c.tap.seed = s("tap");
        c.membership.attacker.seed = s("attacker");
        c.membership.mlp.seed = s("mlp");
        c.ownership.inversion.seed = s("inversion");
        if let Some(d) = c.defense.as_mut() {
            d.seed = s("defense");
        }
        c
    }

    pub fn dataset_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "dataset", &[])
    }

    pub fn split_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "split", &[])
    }

    pub fn partition_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "partition", &[])
    }

    pub fn shadow_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "shadow", &[])
    }
}

/// Target graph with its train split applied.
pub fn load_target(cfg: &ExperimentConfig) -> Result<Graph> {
    let g = cfg.dataset.load(cfg.dataset_seed())?;
    if cfg.split.keep_bundle_masks && matches!(cfg.dataset, DatasetSource::Bundle { .. }) {
        return Ok(g);
    }
    g.with_random_split(cfg.split.train_fraction, cfg.split.val_fraction, cfg.split_seed())
}

pub fn load_shadow(cfg: &ExperimentConfig) -> Result<Graph> {
    match (&cfg.membership.shadow, cfg.dataset.sbm_params()) {
        (Some(src), _) => src.load(cfg.shadow_seed()),
        (None, Some(params)) => graph::gen_sbm(&params, cfg.shadow_seed()),
        (None, None) => Err(Error::Config(
            "a bundle dataset needs an explicit membership.shadow source".into(),
        )),
    }
}

pub fn partition_target(cfg: &ExperimentConfig, target: &Graph) -> Result<Partition> {
    partition::partition(target, cfg.clients, cfg.balance_tol, cfg.partition_seed())
}

/// Client graphs as the clients train on them, perturbed when a defense is
/// configured.
pub fn client_graphs(cfg: &ExperimentConfig, parts: &Partition) -> Result<Vec<Graph>> {
    match &cfg.defense {
        None => Ok(parts.subgraphs().to_vec()),
        Some(d) => parts
            .subgraphs()
            .iter()
            .enumerate()
            .map(|(k, g)| defense::perturb_graph(g, d, k))
            .collect(),
    }
}

pub fn train(cfg: &ExperimentConfig, parts: &Partition) -> Result<FedRun> {
    let graphs = client_graphs(cfg, parts)?;
    fed::run_federation(&graphs, &cfg.fed, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MembershipResult {
    pub auc: f64,
    pub rows: Vec<ScoreRow>,
    pub classifier: MlpParams,
    pub attacker: ModelParams,
}

/// Shadow attack against `global`; members are the target's train nodes.
/// `initial` is the federation's starting model, the attacker's start point
/// under the default init.
pub fn membership_attack(
    cfg: &ExperimentConfig,
    target: &Graph,
    shadow: &Graph,
    global: &ModelParams,
    initial: &ModelParams,
) -> Result<MembershipResult> {
    let a = &cfg.membership.attacker;
    let start = match a.init {
        AttackerInit::GlobalInit => Some(initial),
        AttackerInit::Random => None,
    };
    if shadow.num_features() != global.input_dim() && start.is_some() {
        return Err(Error::Config(
            "attacker init from the global model needs shadow features of the target's width".into(),
        ));
    }
    let attacker = mia::train_attacker_gnn(shadow, a, global.hidden(), global.mode, start)?;
    let ds = mia::build_attack_dataset(&attacker, shadow)?;
    let clf = mia::train_mlp(&ds, &cfg.membership.mlp)?;
    let nodes: Vec<usize> = (0..target.num_nodes()).collect();
    let scores = mia::infer_membership(&clf.params, global, target, &nodes)?;
    let truth = target.train_mask().to_vec();
    let auc = metrics::auc(&ScoredLabels::new(scores.clone(), truth.clone())?)?;
    let rows = nodes
        .iter()
        .map(|&i| ScoreRow {
            node: i,
            score: scores[i],
            true_member: truth[i],
        })
        .collect();
    Ok(MembershipResult {
        auc,
        rows,
        classifier: clf.params,
        attacker: attacker.params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionRow {
    pub client: usize,
    pub source_round: usize,
    pub nodes: usize,
    pub edge_auc: f64,
    pub rnmse: f64,
    pub rnmse_baseline: f64,
    pub final_loss: f64,
    pub kl_similarity: f64,
}

pub fn inversion_csv(rows: &[InversionRow]) -> String {
    let mut s = String::from("client,source_round,nodes,edge_auc,rnmse,rnmse_baseline,final_loss,kl_similarity\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.client, r.source_round, r.nodes, r.edge_auc, r.rnmse, r.rnmse_baseline, r.final_loss, r.kl_similarity
        ));
    }
    s
}

/// Random re-initialization used as the feature-reconstruction baseline.
pub fn baseline_features(n: usize, d: usize, seed: u64) -> Array2<f64> {
    inversion::init_dummy(n, d, rng::derive_seed(seed, "rnmse-baseline", &[])).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientInversion {
    pub reconstruction: Reconstruction,
    pub row: InversionRow,
}

/// Inverts one intercepted upload of every client against the global
/// model of that round. The attacker knows each client's labels, train
/// mask, node count and edge density.
pub fn invert_clients(
    cfg: &ExperimentConfig,
    parts: &Partition,
    records: &[RoundRecord],
) -> Result<Vec<ClientInversion>> {
    let trace = tap::tap(records, &cfg.tap)?;
    (0..parts.k())
        .into_par_iter()
        .map(|k| {
            // A saturated model can upload an exactly zero W1 gradient,
            // which carries nothing to invert (its squared norm can also underflow).
            let usable = |t: &usize| trace.cells[*t][k].intercepted && records[*t].uploads[k].w1.iter().map(|v| v * v).sum::<f64>() > 0.0;
            let t = match cfg.ownership.source_round {
                SourceRound::Last => (0..records.len()).rev().find(usable),
                SourceRound::First => (0..records.len()).find(usable),
            }
                .ok_or_else(|| Error::Empty(format!("no nonzero upload of client {k} was intercepted")))?;
            let client = parts.subgraph(k);
            let mut icfg = cfg.ownership.inversion.clone();
            icfg.seed = rng::derive_seed(icfg.seed, "client", &[k as u64]);
            if cfg.ownership.rho_from_client {
                icfg.rho = inversion::edge_density(client);
            }
            let g_true = &records[t].uploads[k].w1;
            let rec = inversion::invert(&records[t].snapshot, g_true, client.labels(), client.train_mask(), &icfg)?;
            let n = client.num_nodes();
            let edge_auc = if n >= 3 {
                metrics::edge_auc(&client.adjacency_dense(), &rec.a_cont).unwrap_or(f64::NAN)
            } else {
                f64::NAN
            };
            let rnmse = metrics::rnmse_matrix(client.features(), &rec.x_hat)?;
            let base = baseline_features(n, client.num_features(), icfg.seed);
            let rnmse_baseline = metrics::rnmse_matrix(client.features(), &base)?;
            let recon_graph = rec.to_graph(client.num_classes())?;
            let kl_similarity = proto::structural_similarity_kl(&recon_graph, client, cfg.ownership.kl_bins, cfg.ownership.kl_eps)?;
            let row = InversionRow {
                client: k,
                source_round: t,
                nodes: n,
                edge_auc,
                rnmse,
                rnmse_baseline,
                final_loss: rec.trace.last().map_or(f64::NAN, |l| l.total),
                kl_similarity,
            };
            Ok(ClientInversion { reconstruction: rec, row })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OwnershipResult {
    pub accuracy: f64,
    pub assignments: Vec<Assignment>,
    pub truth: Vec<usize>,
    pub prototypes: Vec<PrototypeSet>,
}

/// Builds prototypes from the reconstructions and assigns every target node.
pub fn ownership_from_reconstructions(
    global: &ModelParams,
    target: &Graph,
    parts: &Partition,
    recons: &[Reconstruction],
) -> Result<OwnershipResult> {
    let graphs = recons
        .iter()
        .map(|r| r.to_graph(target.num_classes()))
        .collect::<Result<Vec<_>>>()?;
    let prototypes = proto::build_prototypes(global, &graphs)?;
    let nodes: Vec<usize> = (0..target.num_nodes()).collect();
    let assignments = proto::assign_owners(global, target, &nodes, &prototypes)?;
    let truth = parts.assignment().to_vec();
    let pred: Vec<usize> = assignments.iter().map(|a| a.pred).collect();
    let accuracy = proto::ownership_accuracy(&pred, &truth)?;
    Ok(OwnershipResult {
        accuracy,
        assignments,
        truth,
        prototypes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OwnershipRun {
    pub inversions: Vec<ClientInversion>,
    pub result: OwnershipResult,
}

pub fn ownership_attack(
    cfg: &ExperimentConfig,
    target: &Graph,
    parts: &Partition,
    global: &ModelParams,
    records: &[RoundRecord],
) -> Result<OwnershipRun> {
    let inversions = invert_clients(cfg, parts, records)?;
    let recons: Vec<Reconstruction> = inversions.iter().map(|c| c.reconstruction.clone()).collect();
    let result = ownership_from_reconstructions(global, target, parts, &recons)?;
    Ok(OwnershipRun { inversions, result })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub target: Graph,
    pub partition: Partition,
    pub run: FedRun,
    pub test_acc: f64,
    pub membership: MembershipResult,
    pub ownership: OwnershipRun,
}

/// Accuracy of `global` on the target nodes outside the train split.
pub fn held_out_accuracy(global: &ModelParams, target: &Graph) -> Result<f64> {
    let mask: Vec<bool> = target.train_mask().iter().map(|m| !m).collect();
    if !mask.iter().any(|&m| m) {
        return gnn::accuracy(global, target, target.train_mask());
    }
    gnn::accuracy(global, target, &mask)
}

/// Full run: federation, then both attacks against the final model.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let target = load_target(&cfg)?;
    let partition = partition_target(&cfg, &target)?;
    let run = train(&cfg, &partition)?;
    let test_acc = held_out_accuracy(&run.params, &target)?;
    let initial = &run.records[0].snapshot;
    let shadow = load_shadow(&cfg)?;
    let membership = membership_attack(&cfg, &target, &shadow, &run.params, initial)?;
    let ownership = ownership_attack(&cfg, &target, &partition, &run.params, &run.records)?;
    Ok(ExperimentResult {
        target,
        partition,
        run,
        test_acc,
        membership,
        ownership,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eta: f64,
    pub test_acc: f64,
    pub mi_auc: f64,
    pub own_acc: f64,
    pub seed: u64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("eta,test_acc,mi_auc,own_acc,seed\n");
    for r in rows {
        let eta = if r.eta.is_infinite() { "inf".to_string() } else { r.eta.to_string() };
        s.push_str(&format!("{eta},{},{},{},{}\n", r.test_acc, r.mi_auc, r.own_acc, r.seed));
    }
    s
}

/// Reruns the experiment for each `eta` (infinite means undefended) with a
/// shared base seed.
pub fn tradeoff_sweep(cfg: &ExperimentConfig, etas: &[f64]) -> Result<Vec<SweepRow>> {
    if etas.is_empty() {
        return Err(Error::Empty("no eta values to sweep".into()));
    }
    etas.par_iter()
        .map(|&eta| {
            let mut c = cfg.clone();
            c.defense = Some(DefenseConfig {
                eta,
                ..cfg.defense.clone().unwrap_or_default()
            });
            let r = run_experiment(&c)?;
            Ok(SweepRow {
                eta,
                test_acc: r.test_acc,
                mi_auc: r.membership.auc,
                own_acc: r.ownership.result.accuracy,
                seed: cfg.seed,
            })
        })
        .collect()
}
