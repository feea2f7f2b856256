use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ccmia_core::fed::{self, Strategy};
use ccmia_core::gnn::{self, ModelParams};
use ccmia_core::graph::{self, Graph};
use ccmia_core::inversion::Reconstruction;
use ccmia_core::partition::{self, Partition};
use ccmia_core::pipeline::{self, ClientInversion, DatasetSource, ExperimentConfig};
use ccmia_core::{fsio, mia, proto, tap, Error};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::manifest::{self, Entry};
use crate::{Command, Common};

#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    pub code: u8,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: "usage".into(),
            message: message.into(),
            code: 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidParameter(_) => 2,
            _ => 1,
        };
        CliError {
            kind: e.kind().into(),
            message: e.to_string(),
            code,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Resolved run context shared by all subcommands.
struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    artifacts: Vec<String>,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        let out = common
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out).map_err(|e| CliError {
            kind: "io".into(),
            message: format!("cannot create {}: {e}", out.display()),
            code: 1,
        })?;
        Ok(Ctx {
            cfg,
            out,
            artifacts: Vec::new(),
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn wrote(&mut self, rel: impl Into<String>) {
        self.artifacts.push(rel.into());
    }

    fn write_json(&mut self, rel: &str, v: &impl Serialize) -> Result<()> {
        fsio::write_atomic_str(&self.path(rel), &(serde_json::to_string_pretty(v)? + "\n"))?;
        self.wrote(rel);
        Ok(())
    }

    fn write_str(&mut self, rel: &str, text: &str) -> Result<()> {
        fsio::write_atomic_str(&self.path(rel), text)?;
        self.wrote(rel);
        Ok(())
    }

    fn write_bundle(&mut self, rel: &str, g: &Graph) -> Result<()> {
        let dir = self.path(rel);
        graph::save_bundle(g, &dir)?;
        self.wrote_dir(rel)
    }

    fn wrote_dir(&mut self, rel: &str) -> Result<()> {
        let dir = self.path(rel);
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        for e in entries.flatten() {
            if e.path().is_file() {
                self.wrote(format!("{rel}/{}", e.file_name().to_string_lossy()));
            }
        }
        Ok(())
    }

    fn finish(self, subcommand: &str, started: Instant) -> Result<()> {
        let seeds = seed_table(&self.cfg);
        let config = serde_json::to_value(&self.cfg)?;
        manifest::record(
            &self.out,
            Entry {
                subcommand,
                config,
                seeds,
                artifacts: self.artifacts,
                wall_time: started.elapsed(),
            },
        )?;
        Ok(())
    }

    fn target(&self) -> Result<Graph> {
        load_stage_bundle(&self.path("target"), "gen-synth")
    }

    fn partition(&self, target: &Graph) -> Result<Partition> {
        let p = self.path("partition.csv");
        if !p.exists() {
            return Err(missing(&p, "partition"));
        }
        Ok(partition::load_partition(&p, target, None)?)
    }

    fn model(&self, rel: &str) -> Result<ModelParams> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(missing(&p, "train-fed"));
        }
        Ok(ModelParams::load(&p)?)
    }

    fn records(&self) -> Result<Vec<fed::RoundRecord>> {
        let p = self.path("records.ckpt");
        if !p.exists() {
            return Err(missing(&p, "train-fed"));
        }
        Ok(fed::load_records(&p)?)
    }
}

fn missing(path: &Path, stage: &str) -> CliError {
    CliError {
        kind: "missing_file".into(),
        message: format!("{} not found; run `ccmia {stage}` first", path.display()),
        code: 1,
    }
}

fn load_stage_bundle(dir: &Path, stage: &str) -> Result<Graph> {
    if !dir.join("meta.json").exists() {
        return Err(missing(dir, stage));
    }
    Ok(graph::load_bundle(dir)?)
}

fn seed_table(cfg: &ExperimentConfig) -> Value {
    let r = cfg.resolved();
    json!({
        "master": cfg.seed,
        "dataset": cfg.dataset_seed(),
        "split": cfg.split_seed(),
        "partition": cfg.partition_seed(),
        "shadow": cfg.shadow_seed(),
        "fed": r.fed.seed,
        "tap": r.tap.seed,
        "attacker": r.membership.attacker.seed,
        "mlp": r.membership.mlp.seed,
        "inversion": r.ownership.inversion.seed,
        "defense": r.defense.as_ref().map(|d| d.seed),
    })
}

pub fn run(cmd: &Command) -> Result<()> {
    let started = Instant::now();
    match cmd {
        Command::GenSynth(c) => gen_synth(Ctx::new(c)?, started),
        Command::Partition {
            common,
            k,
            balance_tol,
            input,
        } => {
            let mut ctx = Ctx::new(common)?;
            if let Some(k) = k {
                ctx.cfg.clients = *k;
            }
            if let Some(t) = balance_tol {
                ctx.cfg.balance_tol = *t;
            }
            partition_stage(ctx, input.clone(), started)
        }
        Command::TrainFed { common, strategy, rounds } => {
            let mut ctx = Ctx::new(common)?;
            if let Some(s) = strategy {
                ctx.cfg.fed.strategy = serde_json::from_value::<Strategy>(json!(s)).map_err(|_| {
                    CliError::usage(format!(
                        "unknown strategy {s:?}; expected one of {}",
                        Strategy::ALL.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
                    ))
                })?;
            }
            if let Some(r) = rounds {
                ctx.cfg.fed.rounds = *r;
            }
            train_fed(ctx, started)
        }
        Command::AttackMi(c) => attack_mi(Ctx::new(c)?, started),
        Command::AttackOwn { common, gamma } => {
            let mut ctx = Ctx::new(common)?;
            if let Some(g) = gamma {
                ctx.cfg.tap.gamma = *g;
            }
            attack_own(ctx, started)
        }
        Command::Invert { common, gamma } => {
            let mut ctx = Ctx::new(common)?;
            if let Some(g) = gamma {
                ctx.cfg.tap.gamma = *g;
            }
            invert_stage(ctx, started)
        }
        Command::Defend { common, etas } => defend(Ctx::new(common)?, etas, started),
        Command::Report { common, runs } => report(Ctx::new(common)?, runs, started),
    }
}

fn validated(ctx: &Ctx) -> Result<ExperimentConfig> {
    ctx.cfg.validate()?;
    Ok(ctx.cfg.resolved())
}

fn gen_synth(mut ctx: Ctx, started: Instant) -> Result<()> {
    let cfg = validated(&ctx)?;
    if matches!(cfg.dataset, DatasetSource::Bundle { .. }) {
        return Err(Error::Config("gen-synth needs an sbm dataset source".into()).into());
    }
    let target = pipeline::load_target(&cfg)?;
    let shadow = pipeline::load_shadow(&cfg)?;
    ctx.write_bundle("target", &target)?;
    ctx.write_bundle("shadow", &shadow)?;
    ctx.finish("gen-synth", started)
}

fn partition_stage(mut ctx: Ctx, input: Option<PathBuf>, started: Instant) -> Result<()> {
    let cfg = validated(&ctx)?;
    let target = match input {
        Some(dir) => load_stage_bundle(&dir, "gen-synth")?,
        None => ctx.target()?,
    };
    let parts = pipeline::partition_target(&cfg, &target)?;
    parts.save(&ctx.path("partition.csv"))?;
    ctx.wrote("partition.csv");
    let summary = json!({
        "k": parts.k(),
        "sizes": parts.part_sizes(),
        "edge_cut": partition::edge_cut(&target, &parts),
        "class_distribution": partition::class_distribution(&parts),
    });
    ctx.write_json("partition.json", &summary)?;
    ctx.finish("partition", started)
}

fn train_fed(mut ctx: Ctx, started: Instant) -> Result<()> {
    let target = ctx.target()?;
    let parts = ctx.partition(&target)?;
    // The partition on disk decides the client count.
    ctx.cfg.clients = parts.k();
    let cfg = validated(&ctx)?;
    let run = pipeline::train(&cfg, &parts)?;
    run.params.save(&ctx.path("global.ckpt"))?;
    ctx.wrote("global.ckpt");
    run.records[0].snapshot.save(&ctx.path("init.ckpt"))?;
    ctx.wrote("init.ckpt");
    fed::save_records(&run.records, &ctx.path("records.ckpt"))?;
    ctx.wrote("records.ckpt");
    fed::save_rounds_csv(&run.log, &ctx.path("rounds.csv"))?;
    ctx.wrote("rounds.csv");
    let summary = json!({
        "strategy": cfg.fed.strategy.as_str(),
        "rounds": cfg.fed.rounds,
        "clients": parts.k(),
        "train_acc": gnn::accuracy(&run.params, &target, target.train_mask())?,
        "test_acc": pipeline::held_out_accuracy(&run.params, &target)?,
        "final_loss": run.mean_losses().last().copied(),
    });
    ctx.write_json("train.json", &summary)?;
    ctx.finish("train-fed", started)
}

fn strategy_of(ctx: &Ctx) -> String {
    std::fs::read_to_string(ctx.path("train.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|v| v["strategy"].as_str().map(String::from))
        .unwrap_or_else(|| ctx.cfg.fed.strategy.as_str().to_string())
}

fn attack_mi(mut ctx: Ctx, started: Instant) -> Result<()> {
    let cfg = validated(&ctx)?;
    let target = ctx.target()?;
    let shadow_dir = ctx.path("shadow");
    let shadow = if shadow_dir.join("meta.json").exists() {
        graph::load_bundle(&shadow_dir)?
    } else {
        pipeline::load_shadow(&cfg)?
    };
    let global = ctx.model("global.ckpt")?;
    let initial = ctx.model("init.ckpt")?;
    let r = pipeline::membership_attack(&cfg, &target, &shadow, &global, &initial)?;
    mia::save_scores_csv(&r.rows, &ctx.path("mi_scores.csv"))?;
    ctx.wrote("mi_scores.csv");
    r.classifier.save(&ctx.path("mi_classifier.ckpt"))?;
    ctx.wrote("mi_classifier.ckpt");
    let summary = json!({
        "strategy": strategy_of(&ctx),
        "auc": r.auc,
        "nodes": r.rows.len(),
        "members": r.rows.iter().filter(|r| r.true_member).count(),
    });
    ctx.write_json("mi.json", &summary)?;
    ctx.finish("attack-mi", started)
}

fn save_inversions(ctx: &mut Ctx, target: &Graph, inv: &[ClientInversion]) -> Result<()> {
    for c in inv {
        let rel = format!("recon/client{}", c.row.client);
        c.reconstruction.save(&ctx.path(&rel), target.num_classes())?;
        ctx.wrote_dir(&rel)?;
    }
    let rows: Vec<_> = inv.iter().map(|c| c.row.clone()).collect();
    ctx.write_str("inversion.csv", &pipeline::inversion_csv(&rows))?;
    let mean = |f: fn(&pipeline::InversionRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let summary = json!({
        "clients": rows.len(),
        "edge_auc": mean(|r| r.edge_auc),
        "rnmse": mean(|r| r.rnmse),
        "rnmse_baseline": mean(|r| r.rnmse_baseline),
    });
    ctx.write_json("inversion.json", &summary)
}

fn tapped(ctx: &mut Ctx, cfg: &ExperimentConfig, records: &[fed::RoundRecord]) -> Result<()> {
    let trace = tap::tap(records, &cfg.tap)?;
    tap::save_tap_csv(&trace, records, &ctx.path("tap.csv"))?;
    ctx.wrote("tap.csv");
    Ok(())
}

fn invert_stage(mut ctx: Ctx, started: Instant) -> Result<()> {
    let cfg = validated(&ctx)?;
    let target = ctx.target()?;
    let parts = ctx.partition(&target)?;
    let records = ctx.records()?;
    tapped(&mut ctx, &cfg, &records)?;
    let inv = pipeline::invert_clients(&cfg, &parts, &records)?;
    save_inversions(&mut ctx, &target, &inv)?;
    ctx.finish("invert", started)
}

fn attack_own(mut ctx: Ctx, started: Instant) -> Result<()> {
    let cfg = validated(&ctx)?;
    let target = ctx.target()?;
    let parts = ctx.partition(&target)?;
    let records = ctx.records()?;
    let global = ctx.model("global.ckpt")?;
    tapped(&mut ctx, &cfg, &records)?;
    let own = pipeline::ownership_attack(&cfg, &target, &parts, &global, &records)?;
    save_inversions(&mut ctx, &target, &own.inversions)?;
    let r = &own.result;
    proto::save_ownership_csv(&r.assignments, &r.truth, &ctx.path("ownership.csv"))?;
    ctx.wrote("ownership.csv");
    proto::prototypes_to_checkpoint(&r.prototypes).save(&ctx.path("prototypes.ckpt"))?;
    ctx.wrote("prototypes.ckpt");
    let recons: Vec<&Reconstruction> = own.inversions.iter().map(|c| &c.reconstruction).collect();
    let summary = json!({
        "strategy": strategy_of(&ctx),
        "clients": parts.k(),
        "accuracy": r.accuracy,
        "uniform_baseline": 1.0 / parts.k() as f64,
        "nodes": r.assignments.len(),
        "reconstructed_nodes": recons.iter().map(|r| r.labels.len()).collect::<Vec<_>>(),
    });
    ctx.write_json("ownership.json", &summary)?;
    ctx.finish("attack-own", started)
}

fn parse_etas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            let t = t.trim();
            match t.to_ascii_lowercase().as_str() {
                "inf" | "infinity" => Ok(f64::INFINITY),
                _ => t
                    .parse::<f64>()
                    .ok()
                    .filter(|v| *v > 0.0)
                    .ok_or_else(|| CliError::usage(format!("bad eta {t:?}"))),
            }
        })
        .collect()
}

fn defend(mut ctx: Ctx, etas: &str, started: Instant) -> Result<()> {
    ctx.cfg.validate()?;
    let etas = parse_etas(etas)?;
    let rows = pipeline::tradeoff_sweep(&ctx.cfg, &etas)?;
    ctx.write_str("defense_sweep.csv", &pipeline::sweep_csv(&rows))?;
    ctx.finish("defend", started)
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
struct ReportRow {
    run: String,
    strategy: String,
    clients: Option<usize>,
    mi_auc: Option<f64>,
    own_acc: Option<f64>,
    edge_auc: Option<f64>,
    rnmse: Option<f64>,
}

fn read_json(path: &Path) -> Option<Value> {
    serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
}

fn report_row(dir: &Path) -> Option<ReportRow> {
    let mi = read_json(&dir.join("mi.json"));
    let own = read_json(&dir.join("ownership.json"));
    let inv = read_json(&dir.join("inversion.json"));
    let train = read_json(&dir.join("train.json"));
    if mi.is_none() && own.is_none() && inv.is_none() {
        return None;
    }
    let strategy = [&train, &mi, &own]
        .iter()
        .find_map(|v| v.as_ref().and_then(|v| v["strategy"].as_str().map(String::from)))
        .unwrap_or_default();
    let clients = [&own, &inv, &train]
        .iter()
        .find_map(|v| v.as_ref().and_then(|v| v["clients"].as_u64()))
        .map(|k| k as usize);
    Some(ReportRow {
        run: dir.display().to_string(),
        strategy,
        clients,
        mi_auc: mi.as_ref().and_then(|v| v["auc"].as_f64()),
        own_acc: own.as_ref().and_then(|v| v["accuracy"].as_f64()),
        edge_auc: inv.as_ref().and_then(|v| v["edge_auc"].as_f64()),
        rnmse: inv.as_ref().and_then(|v| v["rnmse"].as_f64()),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn report(mut ctx: Ctx, runs: &[PathBuf], started: Instant) -> Result<()> {
    let mut dirs = vec![ctx.out.clone()];
    dirs.extend(runs.iter().cloned());
    let rows: Vec<ReportRow> = dirs.iter().filter_map(|d| report_row(d)).collect();
    if rows.is_empty() {
        return Err(Error::Empty("no attack summaries found; run attack-mi or attack-own first".into()).into());
    }
    let ks: BTreeSet<usize> = rows.iter().filter_map(|r| r.clients).collect();
    let mut header = vec!["strategy".to_string(), "mi_auc".to_string()];
    for k in &ks {
        header.push(format!("own_acc_{k}"));
    }
    for k in &ks {
        header.push(format!("edge_auc_{k}"));
        header.push(format!("rnmse_{k}"));
    }
    header.push("run".into());
    let mut csv = header.join(",") + "\n";
    for r in &rows {
        let mut cols = vec![r.strategy.clone(), cell(r.mi_auc)];
        for k in &ks {
            cols.push(if r.clients == Some(*k) { cell(r.own_acc) } else { String::new() });
        }
        for k in &ks {
            let here = r.clients == Some(*k);
            cols.push(if here { cell(r.edge_auc) } else { String::new() });
            cols.push(if here { cell(r.rnmse) } else { String::new() });
        }
        cols.push(r.run.clone());
        csv.push_str(&(cols.join(",") + "\n"));
    }
    print!("{csv}");
    ctx.write_str("report.csv", &csv)?;
    ctx.finish("report", started)
}
