//! Metric-privacy feature perturbation: each row moves by `r·u` with `u`
//! uniform on the unit sphere and `r ~ Gamma(D, 1/η)`.

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    /// Privacy budget; infinite disables the perturbation. Written as the
    /// string `"inf"` in JSON.
    #[serde(serialize_with = "ser_eta", deserialize_with = "de_eta")]
    pub eta: f64,
    pub metric: Metric,
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            eta: f64::INFINITY,
            metric: Metric::Euclidean,
            seed: 0,
        }
    }
}

fn ser_eta<S: Serializer>(eta: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if eta.is_infinite() && *eta > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*eta)
    }
}

fn de_eta<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Eta {
        Num(f64),
        Text(String),
    }
    match Eta::deserialize(d)? {
        Eta::Num(v) => Ok(v),
        Eta::Text(t) if matches!(t.to_ascii_lowercase().as_str(), "inf" | "infinity") => Ok(f64::INFINITY),
        Eta::Text(t) => Err(serde::de::Error::custom(format!("eta must be a number or \"inf\", got {t:?}"))),
    }
}

impl DefenseConfig {
    pub fn is_noop(&self) -> bool {
        self.eta == f64::INFINITY
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta.is_nan() || self.eta <= 0.0 {
            return Err(Error::InvalidParameter(format!("eta must be positive, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Noise vector for row `row`. The radius is drawn as `Gamma(D, 1) / η`,
/// so runs that differ only in `η` share their random numbers.
pub fn noise_row(d: usize, eta: f64, seed: u64, row: usize) -> Array1<f64> {
    let mut r = rng::stream(seed, "defense", &[row as u64]);
    let gamma = Gamma::new(d as f64, 1.0).expect("positive shape");
    let radius = gamma.sample(&mut r) / eta;
    let mut u: Array1<f64> = Array1::from_shape_fn(d, |_| StandardNormal.sample(&mut r));
    let norm = u.dot(&u).sqrt();
    if norm > 0.0 {
        u /= norm;
    }
    u * radius
}

pub fn perturb_features(x: &Array2<f64>, cfg: &DefenseConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    if cfg.is_noop() {
        return Ok(x.clone());
    }
    if x.ncols() == 0 {
        return Err(Error::Dimension("cannot perturb zero-width features".into()));
    }
    let mut out = x.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row += &noise_row(x.ncols(), cfg.eta, cfg.seed, i);
    }
    Ok(out)
}

/// `g` with perturbed features; rows are keyed by `offset + i` so client
/// subgraphs can draw from one stream family without collisions.
pub fn perturb_graph(g: &Graph, cfg: &DefenseConfig, offset: usize) -> Result<Graph> {
    if cfg.is_noop() {
        cfg.validate()?;
        return Ok(g.clone());
    }
    let shifted = DefenseConfig {
        seed: rng::derive_seed(cfg.seed, "defense-graph", &[offset as u64]),
        ..cfg.clone()
    };
    g.with_features(perturb_features(g.features(), &shifted)?)
}
